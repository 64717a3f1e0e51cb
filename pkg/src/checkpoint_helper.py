"""
Checkpoint helper for saving and restoring trained models.
"""

import random
from pathlib import Path

import numpy as np
import torch

from backbone import ModelConfig, SwinRNN
from constants import MANIFEST_NAME
from errors import ConfigurationError, PreconditionError
from perturbation import PerturbationConfig, SwinVRNN
from utils import get_timestamp, load_json, read_blob, save_json, write_blob


class CheckpointHelper:
    """
    Checkpoint directory layout:
    - manifest.json: config snapshot, counters and metric history
    - params/<name>.f32: one little-endian float32 blob per tensor
    - trainer_state.pt: optimizer, scheduler and RNG state
    """

    def __init__(self, checkpoint_dir):
        self.checkpoint_dir = Path(checkpoint_dir)
        self.params_dir = self.checkpoint_dir / "params"
        self.manifest_file = self.checkpoint_dir / MANIFEST_NAME
        self.trainer_state_file = self.checkpoint_dir / "trainer_state.pt"

    def exists(self):
        return self.manifest_file.exists()

    def load_manifest(self):
        """Load the checkpoint manifest."""
        if not self.exists():
            raise PreconditionError(f"no checkpoint found at {self.checkpoint_dir}")
        return load_json(self.manifest_file)

    def save(self, model, manifest, optimizer=None, scheduler=None, extra_state=None):
        """Save parameters, manifest and (optionally) trainer state."""
        self.params_dir.mkdir(parents=True, exist_ok=True)
        parameters = {}
        for name, tensor in model.state_dict().items():
            file_name = f"{name}.f32"
            write_blob(self.params_dir / file_name, tensor.detach().cpu().numpy())
            parameters[name] = {"file": file_name, "shape": list(tensor.shape)}

        if optimizer is not None:
            state = {
                "optimizer": optimizer.state_dict(),
                "scheduler": scheduler.state_dict() if scheduler is not None else None,
                "torch_rng": torch.get_rng_state(),
                "numpy_rng": np.random.get_state(),
                "python_rng": random.getstate(),
            }
            state.update(extra_state or {})
            torch.save(state, self.trainer_state_file)

        manifest = dict(manifest)
        manifest["kind"] = "swinvrnn" if isinstance(model, SwinVRNN) else "swinrnn"
        manifest["parameters"] = parameters
        manifest["saved_at"] = get_timestamp()
        # マニフェストは最後に書く
        save_json(self.manifest_file, manifest)
        return self.checkpoint_dir

    def load_state_dict(self):
        manifest = self.load_manifest()
        return {
            name: torch.from_numpy(np.array(read_blob(self.params_dir / rec["file"], rec["shape"])))
            for name, rec in manifest["parameters"].items()
        }

    def build_model(self):
        """Rebuild the model described by the manifest (parameters not loaded)."""
        manifest = self.load_manifest()
        model_cfg = ModelConfig.from_dict(manifest["model_config"])
        if manifest.get("kind") == "swinvrnn":
            return SwinVRNN(model_cfg, PerturbationConfig(**manifest["perturbation_config"]))
        return SwinRNN(model_cfg)

    def load_model(self, device="cpu"):
        model = self.build_model()
        model.load_state_dict(self.load_state_dict())
        return model.to(device)

    def load_backbone_into(self, model):
        """Copy a phase-1 backbone into a SwinRNN or the backbone of a SwinVRNN."""
        manifest = self.load_manifest()
        if manifest.get("kind") != "swinrnn":
            raise PreconditionError(f"{self.checkpoint_dir} is not a phase-1 backbone checkpoint")
        target = model.backbone if isinstance(model, SwinVRNN) else model
        if ModelConfig.from_dict(manifest["model_config"]).to_dict() != target.cfg.to_dict():
            raise ConfigurationError("phase-1 checkpoint was trained with a different model configuration")
        target.load_state_dict(self.load_state_dict())
        return manifest

    def load_trainer_state(self, optimizer, scheduler=None):
        """Restore optimizer, scheduler and RNG state; returns the raw state dict."""
        if not self.trainer_state_file.exists():
            raise PreconditionError(f"no trainer state saved in {self.checkpoint_dir}")
        state = torch.load(self.trainer_state_file, weights_only=False)
        optimizer.load_state_dict(state["optimizer"])
        if scheduler is not None and state.get("scheduler") is not None:
            scheduler.load_state_dict(state["scheduler"])
        torch.set_rng_state(state["torch_rng"])
        np.random.set_state(state["numpy_rng"])
        random.setstate(state["python_rng"])
        return state
