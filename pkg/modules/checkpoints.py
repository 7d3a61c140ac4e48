"""
Checkpoint Module
Weight blobs plus a JSON manifest with digests, provenance and fingerprint hash
"""

import hashlib
import json
import logging
from datetime import datetime, timezone
from pathlib import Path
from typing import Any, Dict, Literal, Mapping, Optional, Tuple, Union

import torch
from pydantic import BaseModel, Field

from modules.errors import ChecksumError, FingerprintMismatchError, MissingPrerequisiteError

logger = logging.getLogger(__name__)

MANIFEST_FILE = "manifest.json"


class WeightEntry(BaseModel):
    file: str
    digest: str


class CheckpointManifest(BaseModel):
    """Everything needed to reproduce and verify one training stage"""

    stage: Literal["vae", "ldm"]
    weights: Dict[str, WeightEntry]
    fingerprint_hash: str
    config_digest: str
    config_snapshot: Dict[str, Any]
    seed: int
    created_at: str = Field(default_factory=lambda: datetime.now(timezone.utc).isoformat())
    parent_digest: Optional[str] = None
    encoder_identity: Optional[str] = None
    schedule: Optional[Dict[str, Any]] = None
    extras: Dict[str, Any] = Field(default_factory=dict)


def state_digest(source: Union[torch.nn.Module, Mapping[str, torch.Tensor]]) -> str:
    """sha256 over parameter and buffer bytes in key order"""
    state = source.state_dict() if isinstance(source, torch.nn.Module) else source
    h = hashlib.sha256()
    for key in sorted(state):
        tensor = state[key]
        h.update(key.encode("utf-8"))
        if isinstance(tensor, torch.Tensor):
            array = tensor.detach().to("cpu").contiguous()
            h.update(str(array.dtype).encode("utf-8"))
            h.update(str(tuple(array.shape)).encode("utf-8"))
            h.update(array.numpy().tobytes())
        else:
            h.update(repr(tensor).encode("utf-8"))
    return h.hexdigest()


def manifest_digest(manifest: CheckpointManifest) -> str:
    """Digest of the manifest content, creation time excluded"""
    payload = manifest.model_dump(mode="json", exclude={"created_at"})
    return hashlib.sha256(json.dumps(payload, sort_keys=True).encode("utf-8")).hexdigest()


def save_checkpoint(out_dir: Path, stage: str, modules: Mapping[str, torch.nn.Module], fingerprint_hash: str,
                    config_snapshot: Dict[str, Any], config_digest: str, seed: int, **fields) -> CheckpointManifest:
    """
    Persist weights and their manifest

    Args:
        out_dir: Checkpoint directory
        stage: 'vae' or 'ldm'
        modules: {name: module} saved as <name>.pt
        fingerprint_hash: Digest of the dataset fingerprint
        config_snapshot: Config dump embedded for provenance
        config_digest: RunConfig.digest()
        seed: Training seed
        fields: parent_digest, encoder_identity, schedule, extras

    Returns:
        The written CheckpointManifest
    """
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    # Weights on CPU, one file per module
    weights = {}
    for name, module in modules.items():
        state = {k: v.detach().to("cpu") for k, v in module.state_dict().items()}
        file_name = f"{name}.pt"
        torch.save(state, out_dir / file_name)
        weights[name] = WeightEntry(file=file_name, digest=state_digest(state))
    manifest = CheckpointManifest(
        stage=stage,
        weights=weights,
        fingerprint_hash=fingerprint_hash,
        config_digest=config_digest,
        config_snapshot=config_snapshot,
        seed=seed,
        **fields,
    )
    (out_dir / MANIFEST_FILE).write_text(manifest.model_dump_json(indent=2), encoding="utf-8")
    logger.info("Saved %s checkpoint to %s (%s)", stage, out_dir, manifest_digest(manifest)[:12])
    return manifest


def read_manifest(ckpt_dir: Path) -> CheckpointManifest:
    path = Path(ckpt_dir) / MANIFEST_FILE
    if not path.exists():
        raise MissingPrerequisiteError(f"no checkpoint manifest at {path}")
    return CheckpointManifest.model_validate_json(path.read_text(encoding="utf-8"))


def load_checkpoint(ckpt_dir: Path, expected_fingerprint_hash: Optional[str] = None,
                    force: bool = False) -> Tuple[CheckpointManifest, Dict[str, Dict[str, torch.Tensor]]]:
    """
    Load and verify a checkpoint

    Args:
        ckpt_dir: Directory holding manifest.json and weight files
        expected_fingerprint_hash: Fingerprint of the dataset about to be used
        force: Accept a fingerprint mismatch with a warning

    Returns:
        (manifest, {name: state_dict})
    """
    ckpt_dir = Path(ckpt_dir)
    manifest = read_manifest(ckpt_dir)
    if expected_fingerprint_hash is not None and manifest.fingerprint_hash != expected_fingerprint_hash:
        message = (f"{manifest.stage} checkpoint in {ckpt_dir} was trained on fingerprint "
                   f"{manifest.fingerprint_hash[:12]}, dataset has {expected_fingerprint_hash[:12]}")
        if not force:
            raise FingerprintMismatchError(message + " (use --force to override)")
        logger.warning("%s; continuing because of --force", message)

    # Verify every weight file against its recorded digest
    states = {}
    for name, entry in manifest.weights.items():
        path = ckpt_dir / entry.file
        if not path.exists():
            raise MissingPrerequisiteError(f"weight file missing: {path}")
        state = torch.load(path, map_location="cpu", weights_only=True)
        if state_digest(state) != entry.digest:
            raise ChecksumError(f"{path} does not match the digest recorded in its manifest")
        states[name] = state
    return manifest, states
