"""
Checkpoint persistence and the training run directory.

A checkpoint is a single zip archive holding

- ``manifest.json``: format version, step, experiment config, tensor names
  and shapes, and the SHA-256 of the payload
- ``payload.pt``: network parameters, optimizer states and random streams

The payload bytes depend only on the training state, never on wall-clock
time; the manifest's ``created`` field is the only timestamp.
"""

import hashlib
import io
import json
import logging
import zipfile
from dataclasses import dataclass
from datetime import datetime, timezone
from pathlib import Path
from typing import Dict, List, Tuple, Union

import torch

from anodet.config import ExperimentConfig, parse_config
from anodet.errors import CheckpointError
from anodet.losses import LossBreakdown
from anodet.models import ModelTriplet, build_triplet
from anodet.settings import log_run_event
from anodet.trainer import TrainState, init_state

logger = logging.getLogger(__name__)

FORMAT_VERSION = 'anodet-checkpoint/1'
MANIFEST_NAME = 'manifest.json'
PAYLOAD_NAME = 'payload.pt'
_ZIP_EPOCH = (1980, 1, 1, 0, 0, 0)


@dataclass
class Checkpoint:
    version: str
    step: int
    config: ExperimentConfig
    payload: dict
    checksum: str
    manifest: dict


def _payload_bytes(state: TrainState) -> bytes:
    buffer = io.BytesIO()
    torch.save(state.state_dict(), buffer)
    return buffer.getvalue()


def _tensor_manifest(state: TrainState) -> Dict[str, List[int]]:
    return {
        f"{net}.{name}": list(tensor.shape)
        for net, tensors in state.models.state_dict().items()
        for name, tensor in tensors.items()
    }


def save_checkpoint(path: Union[str, Path], state: TrainState, config: ExperimentConfig) -> Path:
    """Write ``state`` and its experiment config to a single archive."""
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    payload = _payload_bytes(state)
    manifest = {
        'version': FORMAT_VERSION,
        'step': state.step,
        'config': config.model_dump(mode='json'),
        'tensors': _tensor_manifest(state),
        'checksum': hashlib.sha256(payload).hexdigest(),
        'created': datetime.now(timezone.utc).isoformat(),
    }

    tmp = path.with_suffix(path.suffix + '.tmp')
    with zipfile.ZipFile(tmp, 'w', compression=zipfile.ZIP_STORED) as archive:
        archive.writestr(zipfile.ZipInfo(MANIFEST_NAME, _ZIP_EPOCH), json.dumps(manifest, indent=2, sort_keys=True))
        archive.writestr(zipfile.ZipInfo(PAYLOAD_NAME, _ZIP_EPOCH), payload)
    tmp.replace(path)
    logger.info(f"Saved checkpoint at step {state.step} to {path}")
    return path


def read_manifest(path: Union[str, Path]) -> dict:
    try:
        with zipfile.ZipFile(path) as archive:
            return json.loads(archive.read(MANIFEST_NAME))
    except (OSError, KeyError, zipfile.BadZipFile, json.JSONDecodeError) as e:
        raise CheckpointError(f"cannot read checkpoint {path}: {e}") from e


def load_checkpoint(path: Union[str, Path]) -> Checkpoint:
    """Read and verify a checkpoint archive."""
    manifest = read_manifest(path)
    version = manifest.get('version')
    if version != FORMAT_VERSION:
        raise CheckpointError(f"checkpoint {path} has format '{version}', this version of anodet reads '{FORMAT_VERSION}'")
    with zipfile.ZipFile(path) as archive:
        payload_bytes = archive.read(PAYLOAD_NAME)
    checksum = hashlib.sha256(payload_bytes).hexdigest()
    if checksum != manifest.get('checksum'):
        raise CheckpointError(f"checkpoint {path} failed its checksum (corrupted or modified)")

    payload = torch.load(io.BytesIO(payload_bytes), map_location='cpu', weights_only=True)
    config = parse_config(ExperimentConfig, manifest['config'])
    return Checkpoint(version=version, step=int(manifest['step']), config=config,
                      payload=payload, checksum=checksum, manifest=manifest)


def restore_state(checkpoint: Checkpoint, device: str = 'cpu') -> TrainState:
    """Rebuild a TrainState that continues exactly where the checkpoint stopped."""
    config = checkpoint.config
    state = init_state(config.network_config(), config.train_config(), device)
    state.load_state_dict(checkpoint.payload)
    log_run_event("RESTORE", f"step {state.step} from checkpoint {checkpoint.checksum[:12]}")
    return state


def load_models(path: Union[str, Path], device: str = 'cpu') -> Tuple[ModelTriplet, ExperimentConfig]:
    """Networks only, in eval mode, for scoring and reconstruction."""
    checkpoint = load_checkpoint(path)
    models = build_triplet(checkpoint.config.network_config()).to(device=device)
    models.load_state_dict(checkpoint.payload['models'])
    return models.eval(), checkpoint.config


class RunSink:
    """
    Writes a training run directory: ``metrics.jsonl`` with one record per
    logged step, ``checkpoint_<step>.ckpt`` files and ``final.ckpt``.
    """

    def __init__(self, run_dir: Union[str, Path], config: ExperimentConfig):
        self.run_dir = Path(run_dir)
        self.run_dir.mkdir(parents=True, exist_ok=True)
        self.config = config
        self.metrics_path = self.run_dir / 'metrics.jsonl'
        self.last_checkpoint = None

    def log(self, step: int, breakdown: LossBreakdown):
        with open(self.metrics_path, 'a') as f:
            f.write(json.dumps(breakdown.as_record(step)) + '\n')

    def checkpoint(self, state: TrainState, final: bool = False):
        name = 'final.ckpt' if final else f"checkpoint_{state.step:07d}.ckpt"
        self.last_checkpoint = save_checkpoint(self.run_dir / name, state, self.config)
        log_run_event("CHECKPOINT", f"step {state.step} -> {self.last_checkpoint}")
