"""Encoder + decoder bundle with ablation switches, checkpointing, and
single-pass inference on the refined logits."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .decoder import DecoderConfig, DecoderParams, decoder_forward
from .fileio import load_checkpoint, save_checkpoint
from .synthdata import ENCODER_CHANNELS, init_encoder_params, toy_encoder_forward
from .tensor import Tensor, bilinear_upsample, softmax


@dataclass
class ModelConfig:
    num_classes: int = 4
    width: int = 32
    use_dmf: bool = True
    use_var: bool = True
    use_ugr: bool = True
    use_bnd: bool = True
    use_udmf: bool = True
    use_ema: bool = True
    boundary_tap: str = "e1"
    alpha_mod: float = 1.0
    seed: int = 0
    dtype: str = "float64"

    def __post_init__(self):
        if self.use_udmf and not (self.use_dmf and self.use_var):
            raise ValueError("uncertainty-modulated fusion needs DMF and the variance head")
        if self.use_ugr and not self.use_var:
            raise ValueError("refinement needs the variance head")

    def flags_line(self) -> str:
        on = [n for n in ("dmf", "var", "ugr", "bnd", "udmf", "ema")
              if getattr(self, f"use_{n}")]
        return "+".join(on) if on else "baseline"


class SegModel:
    def __init__(self, cfg: ModelConfig):
        self.cfg = cfg
        dtype = np.dtype(cfg.dtype).type
        rng = np.random.default_rng(cfg.seed)
        self.encoder = init_encoder_params(rng, dtype=dtype)
        dec_cfg = DecoderConfig(
            width=cfg.width,
            num_classes=cfg.num_classes,
            in_channels=ENCODER_CHANNELS,
            alpha_mod=cfg.alpha_mod,
            boundary_tap=cfg.boundary_tap,
            fusion="dmf" if cfg.use_dmf else "static",
            enable_variance=cfg.use_var,
            enable_refine=cfg.use_ugr,
            enable_boundary=cfg.use_bnd,
        )
        self.decoder = DecoderParams(dec_cfg, rng, dtype=dtype)
        self.mode = "uncertainty_modulated" if cfg.use_udmf else "plain"

    @property
    def params(self) -> dict[str, Tensor]:
        out = {f"enc.{k}": v for k, v in self.encoder.items()}
        out.update({f"dec.{k}": v for k, v in self.decoder.tensors.items()})
        return out

    def forward(self, images: np.ndarray, detach_p: bool = False):
        x = Tensor(np.asarray(images, dtype=self.params_dtype()))
        if x.data.ndim == 3:
            x = Tensor(x.data[None])
        pyramid = toy_encoder_forward(x, self.encoder)
        return decoder_forward(pyramid, self.decoder, mode=self.mode,
                               detach_p=detach_p)

    def params_dtype(self):
        return next(iter(self.encoder.values())).data.dtype

    def predict(self, images: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
        """Hard labels and max-softmax confidences at full resolution, from
        the refined logits; no post-processing."""
        arr = np.asarray(images)
        if arr.ndim == 3:
            arr = arr[None]
        h, w = arr.shape[2] , arr.shape[3]
        out = self.forward(arr)
        z_up = bilinear_upsample(out.zstar, h, w)
        p = softmax(z_up, axis=1).data
        return p.argmax(axis=1), p.max(axis=1)

    def zero_grad(self):
        for t in self.params.values():
            t.zero_grad()

    def state_dict(self) -> dict[str, np.ndarray]:
        return {k: v.data.copy() for k, v in self.params.items()}

    def load_state_dict(self, state: dict[str, np.ndarray]):
        params = self.params
        if set(state) != set(params):
            raise ValueError("parameter manifest mismatch")
        for k, arr in state.items():
            if params[k].data.shape != arr.shape:
                raise ValueError(f"{k}: shape mismatch")
            params[k].data[...] = arr

    def clone(self) -> "SegModel":
        other = SegModel(self.cfg)
        other.load_state_dict(self.state_dict())
        return other

    def save(self, directory):
        import os

        roles = {k: ("encoder" if k.startswith("enc.") else "decoder")
                 for k in self.params}
        save_checkpoint(directory, self.params, roles)
        with open(os.path.join(directory, "model_config.txt"), "w") as fh:
            for key, val in vars(self.cfg).items():
                fh.write(f"{key}={val}\n")

    def load(self, directory):
        state = load_checkpoint(directory)
        dtype = self.params_dtype()
        self.load_state_dict({k: v.astype(dtype) for k, v in state.items()})

    @classmethod
    def from_checkpoint(cls, directory) -> "SegModel":
        import os

        kwargs = {}
        with open(os.path.join(directory, "model_config.txt")) as fh:
            for line in fh:
                key, _, val = line.strip().partition("=")
                if key in ("num_classes", "width", "seed"):
                    kwargs[key] = int(val)
                elif key == "alpha_mod":
                    kwargs[key] = float(val)
                elif key in ("boundary_tap", "dtype"):
                    kwargs[key] = val
                else:
                    kwargs[key] = val == "True"
        model = cls(ModelConfig(**kwargs))
        model.load(directory)
        return model
