"""
Checkpoint file: a UTF-8 manifest of ``key = value`` lines, a ``---`` line,
then every parameter array as raw little-endian float64, in manifest order.

    format = rdmd-checkpoint/1
    kind = denoiser
    schedule = {"T":80.0,"sigma_min":0.01}
    network = {...}
    config_hash = <sha256 of schedule + network>
    iteration = 20000
    seed = 0
    array.dec.0.bias = 128
    array.dec.0.weight = 64,128
    payload_sha256 = <sha256 of the payload bytes>
    ---
    <payload>
"""
from __future__ import annotations

import hashlib
import json
import logging
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from rdmd_lab.config import canonical_json, config_hash
from rdmd_lab.errors import CheckpointError, RdmdError
from rdmd_lab.files import write_bytes
from rdmd_lab.networks import DenoiserNet, GeneratorNet, LinearGenerator, NetConfig
from rdmd_lab.schedule import NoiseSchedule

log = logging.getLogger(__name__)

FORMAT = "rdmd-checkpoint/1"
KINDS = ("denoiser", "generator-mlp", "generator-linear")
SEPARATOR = b"\n---\n"
_DTYPE = np.dtype("<f8")


@dataclass
class Checkpoint:
    kind: str
    params: dict[str, np.ndarray]
    schedule: NoiseSchedule
    network: NetConfig | None = None
    iteration: int = 0
    seed: int = 0
    sigma_init: float | None = None
    # free-form run facts (lambda, target spec); strings only
    meta: dict[str, str] = field(default_factory=dict)

    @property
    def config_hash(self) -> str:
        return config_hash(self.schedule, self.network)

    def to_denoiser(self) -> DenoiserNet:
        if self.kind != "denoiser":
            raise CheckpointError(f"checkpoint holds a {self.kind}, not a denoiser")
        return DenoiserNet(self.network, self.params, self.schedule)

    def to_generator(self) -> GeneratorNet | LinearGenerator:
        if self.kind == "generator-mlp":
            return GeneratorNet(DenoiserNet(self.network, self.params, self.schedule), self.sigma_init)
        if self.kind == "generator-linear":
            return LinearGenerator(self.params["weight"].T)
        raise CheckpointError(f"checkpoint holds a {self.kind}, not a generator")


def from_denoiser(net: DenoiserNet, iteration: int, seed: int, **meta: str) -> Checkpoint:
    return Checkpoint("denoiser", net.params, net.schedule, net.config, iteration, seed, meta=dict(meta))


def from_generator(
    gen: GeneratorNet | LinearGenerator,
    schedule: NoiseSchedule,
    iteration: int,
    seed: int,
    **meta: str,
) -> Checkpoint:
    if isinstance(gen, LinearGenerator):
        return Checkpoint("generator-linear", gen.params, schedule, None, iteration, seed, meta=dict(meta))
    return Checkpoint(
        "generator-mlp", gen.params, schedule, gen.config, iteration, seed, sigma_init=gen.sigma_init, meta=dict(meta)
    )


def encode(ckpt: Checkpoint) -> bytes:
    if ckpt.kind not in KINDS:
        raise CheckpointError(f"unknown checkpoint kind {ckpt.kind!r}")
    names = sorted(ckpt.params)
    payload = b"".join(np.ascontiguousarray(ckpt.params[n], dtype=_DTYPE).tobytes() for n in names)
    lines = [
        f"format = {FORMAT}",
        f"kind = {ckpt.kind}",
        f"schedule = {canonical_json(ckpt.schedule.to_dict())}",
        f"network = {canonical_json(ckpt.network.to_dict() if ckpt.network else None)}",
        f"config_hash = {ckpt.config_hash}",
        f"iteration = {ckpt.iteration}",
        f"seed = {ckpt.seed}",
    ]
    if ckpt.sigma_init is not None:
        lines.append(f"sigma_init = {ckpt.sigma_init!r}")
    for key in sorted(ckpt.meta):
        lines.append(f"meta.{key} = {ckpt.meta[key]}")
    for n in names:
        lines.append(f"array.{n} = {','.join(str(d) for d in ckpt.params[n].shape)}")
    lines.append(f"payload_sha256 = {hashlib.sha256(payload).hexdigest()}")
    return "\n".join(lines).encode("utf-8") + SEPARATOR + payload


def _parse_manifest(text: str) -> dict[str, str]:
    out = {}
    for i, line in enumerate(text.split("\n"), start=1):
        key, sep, value = line.partition(" = ")
        if not sep:
            raise CheckpointError(f"manifest line {i} is not 'key = value': {line!r}")
        out[key] = value
    return out


def decode(data: bytes, source: str = "<bytes>") -> Checkpoint:
    head, sep, payload = data.partition(SEPARATOR)
    if not sep:
        raise CheckpointError(f"{source}: no manifest separator")
    try:
        manifest = _parse_manifest(head.decode("utf-8"))
    except UnicodeDecodeError:
        raise CheckpointError(f"{source}: manifest is not UTF-8") from None
    if manifest.get("format") != FORMAT:
        raise CheckpointError(f"{source}: unsupported format {manifest.get('format')!r}")
    if hashlib.sha256(payload).hexdigest() != manifest.get("payload_sha256"):
        raise CheckpointError(f"{source}: payload hash mismatch (file corrupted or truncated)")

    try:
        schedule = NoiseSchedule(**json.loads(manifest["schedule"]))
        net_doc = json.loads(manifest["network"])
        network = NetConfig(**net_doc) if net_doc is not None else None
        sigma_init = float(manifest["sigma_init"]) if "sigma_init" in manifest else None
        iteration = int(manifest["iteration"])
        seed = int(manifest["seed"])
        kind = manifest["kind"]
    except (KeyError, ValueError, TypeError, RdmdError) as e:
        raise CheckpointError(f"{source}: bad manifest ({e})") from None

    params: dict[str, np.ndarray] = {}
    offset = 0
    for key, value in manifest.items():
        if not key.startswith("array."):
            continue
        shape = tuple(int(d) for d in value.split(",")) if value else ()
        count = int(np.prod(shape, dtype=np.int64))
        if offset + count * _DTYPE.itemsize > len(payload):
            raise CheckpointError(f"{source}: payload too short for {key}")
        arr = np.frombuffer(payload, dtype=_DTYPE, count=count, offset=offset)
        params[key[len("array."):]] = arr.astype(np.float64).reshape(shape)
        offset += count * _DTYPE.itemsize
    if offset != len(payload):
        raise CheckpointError(f"{source}: {len(payload) - offset} trailing payload bytes")

    ckpt = Checkpoint(
        kind=kind,
        params=params,
        schedule=schedule,
        network=network,
        iteration=iteration,
        seed=seed,
        sigma_init=sigma_init,
        meta={k[len("meta."):]: v for k, v in manifest.items() if k.startswith("meta.")},
    )
    if ckpt.config_hash != manifest.get("config_hash"):
        raise CheckpointError(f"{source}: config_hash does not match its schedule/network")
    return ckpt


def save_checkpoint(path: str | Path, ckpt: Checkpoint) -> Path:
    path = write_bytes(path, encode(ckpt))
    log.info("wrote %s (%s, %d arrays)", path, ckpt.kind, len(ckpt.params))
    return path


def load_checkpoint(
    path: str | Path,
    schedule: NoiseSchedule | None = None,
    network: NetConfig | None = None,
) -> Checkpoint:
    """Read and verify a checkpoint; refuse it when it was built for another schedule or network."""
    path = Path(path)
    try:
        data = path.read_bytes()
    except OSError as e:
        raise CheckpointError(f"cannot read checkpoint {path}: {e}") from None
    ckpt = decode(data, str(path))
    if schedule is not None and ckpt.schedule != schedule:
        raise CheckpointError(
            f"{path}: schedule mismatch (checkpoint {ckpt.schedule.to_dict()}, config {schedule.to_dict()})"
        )
    if network is not None and ckpt.network is not None and ckpt.network != network:
        raise CheckpointError(f"{path}: network config differs from the run's network section")
    return ckpt
