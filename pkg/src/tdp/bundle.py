"""Trained model bundle: FEN, DPN, simulator, feature normalizer, config.

On disk a bundle is a directory holding ``model.ckpt`` (the checkpoint
container from :mod:`tdp.numerics`), ``normalizer.json`` and ``config.json``.
"""

from __future__ import annotations

from dataclasses import dataclass
from pathlib import Path

import torch

from .codec_sim import SimulatorModel
from .config import TdpConfig
from .dpn import DpnModel
from .fen import FenModel, Normalizer
from .numerics import ParamStore, load_checkpoint, load_params, save_checkpoint

CKPT_NAME = "model.ckpt"
NORMALIZER_NAME = "normalizer.json"
CONFIG_NAME = "config.json"


class MissingCheckpointError(FileNotFoundError):
    pass


@dataclass
class TdpModels:
    fen: FenModel
    dpn: DpnModel
    sim: SimulatorModel
    normalizer: Normalizer
    config: TdpConfig

    @classmethod
    def build(cls, cfg: TdpConfig, normalizer: Normalizer | None = None) -> "TdpModels":
        """Fresh models; parameter init is seeded from ``cfg.seed``."""
        torch.manual_seed(cfg.seed)
        return cls(
            fen=FenModel(cfg.fen_hidden),
            dpn=DpnModel(cfg.dpn_channels, cfg.dpn_blocks),
            sim=SimulatorModel(cfg.sim_channels, cfg.sim_latent, cfg.delta_scale),
            normalizer=normalizer or Normalizer.identity(),
            config=cfg,
        )

    def modules(self) -> dict[str, torch.nn.Module]:
        return {"fen": self.fen, "dpn": self.dpn, "sim": self.sim}

    def param_store(self) -> ParamStore:
        return ParamStore.from_modules(self.modules())

    def eval(self) -> "TdpModels":
        for m in self.modules().values():
            m.eval()
        return self

    def save(self, directory: str | Path, store: ParamStore | None = None, meta: dict | None = None,
             extra_state: dict | None = None) -> Path:
        directory = Path(directory)
        directory.mkdir(parents=True, exist_ok=True)
        store = store or self.param_store()
        tensors = {name: p for name, p in store.items()}
        tensors.update(store.optimizer_state())
        tensors.update(extra_state or {})
        save_checkpoint(directory / CKPT_NAME, tensors, meta or {})
        self.normalizer.save(directory / NORMALIZER_NAME)
        (directory / CONFIG_NAME).write_text(self.config.to_json())
        return directory

    @classmethod
    def load(cls, directory: str | Path, store_out: list | None = None) -> tuple["TdpModels", dict]:
        """Load a bundle; returns (models, checkpoint meta).

        If ``store_out`` is a list, the populated :class:`ParamStore` and raw
        tensors are appended to it so a caller can restore optimizer state.
        """
        directory = Path(directory)
        ckpt = directory / CKPT_NAME
        if not ckpt.is_file():
            raise MissingCheckpointError(f"no checkpoint at {ckpt}")
        cfg = TdpConfig.load(directory / CONFIG_NAME)
        models = cls.build(cfg, Normalizer.load(directory / NORMALIZER_NAME))
        store = models.param_store()
        tensors, meta = load_checkpoint(ckpt, {n: p.shape for n, p in store.items()})
        load_params(store, tensors)
        if store_out is not None:
            store_out.extend([store, tensors])
        return models, meta
