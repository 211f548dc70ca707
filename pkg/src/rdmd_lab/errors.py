class RdmdError(Exception): ...
class ConfigError(RdmdError): ...
class ValidationError(RdmdError): ...
class ShapeError(ValidationError): ...
class GraphError(RdmdError): ...
class TrainingError(RdmdError): ...
class DivergenceError(TrainingError): ...
class CheckpointError(RdmdError): ...
class SamplingError(RdmdError): ...
