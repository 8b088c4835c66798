"""LoRA fine-tuning harness over the exported training manifest.

Defaults mirror the full production recipe: SD 2.1 base, LoRA on the UNet
denoiser and the text encoder, 30k steps at 768px, constant lr 1e-5,
batch 4 per device across 8 devices (effective 32), one caption sampled
uniformly per image per step.

Only the ``smoke`` backend is runnable at desk scale: it trains a tiny
in-repo denoiser/text-encoder pair with real LoRA adapters on CPU so the
harness contract (data flow, per-step caption sampling, loss logging,
LoRA-only checkpoints, determinism) is exercised end to end. The ``sd21``
backend documents the full run and refuses with a clear error when its
prerequisites (diffusers, pretrained weights, GPUs) are absent.
"""

from __future__ import annotations

import json
import logging
import math
import zlib
from collections import Counter
from dataclasses import asdict, dataclass, field, replace
from pathlib import Path

import numpy as np
import torch
import torch.nn.functional as F
import yaml
from PIL import Image
from torch import nn

from .lora import apply_lora, lora_parameters, lora_state_dict

log = logging.getLogger(__name__)

LORA_TARGETS = ("unet", "text_encoder")

_VOCAB = 4096
_DIM = 32
_TIMESTEPS = 1000


class TrainerError(RuntimeError):
    pass


@dataclass(frozen=True)
class TrainConfig:
    manifest: str
    base_model_id: str = "stabilityai/stable-diffusion-2-1"
    backend: str = "sd21"
    lora_targets: tuple[str, ...] = LORA_TARGETS
    lora_rank: int = 8
    lora_alpha: float = 8.0
    steps: int = 30_000
    learning_rate: float = 1e-5
    resolution: int = 768
    per_device_batch: int = 4
    devices: int = 8
    caption_sampling: str = "uniform_per_step"
    seed: int = 0
    log_every: int = 10
    overrides: dict = field(default_factory=dict, compare=False)

    @property
    def effective_batch(self) -> int:
        return self.per_device_batch * self.devices

    def validate(self) -> None:
        if self.resolution % 8 != 0:
            raise TrainerError(f"resolution must be a multiple of 8, got {self.resolution}")
        unknown = set(self.lora_targets) - set(LORA_TARGETS)
        if unknown:
            raise TrainerError(f"unknown lora target(s): {sorted(unknown)}")
        if self.steps < 1 or self.per_device_batch < 1 or self.devices < 1:
            raise TrainerError("steps, per_device_batch and devices must all be >= 1")
        if self.caption_sampling != "uniform_per_step":
            raise TrainerError(f"unsupported caption_sampling {self.caption_sampling!r}")


def emit_config(manifest_path: str | Path, overrides: dict | None = None, out: str | Path | None = None) -> TrainConfig:
    """Production-default config for a manifest, with overrides recorded.

    Raises TrainerError if the manifest is missing or an override names an
    unknown field.
    """
    manifest_path = Path(manifest_path)
    if not manifest_path.exists():
        raise TrainerError(f"manifest not found: {manifest_path}")
    config = TrainConfig(manifest=str(manifest_path))
    overrides = dict(overrides or {})
    valid_fields = set(asdict(config)) - {"manifest", "overrides"}
    unknown = set(overrides) - valid_fields
    if unknown:
        raise TrainerError(f"invalid override(s): {sorted(unknown)}; valid: {sorted(valid_fields)}")
    if "lora_targets" in overrides:
        overrides["lora_targets"] = tuple(overrides["lora_targets"])
    config = replace(config, **overrides, overrides=dict(overrides))
    config.validate()
    if out is not None:
        write_config(config, out)
    return config


def write_config(config: TrainConfig, path: str | Path) -> None:
    doc = {
        "base_model_id": config.base_model_id,
        "backend": config.backend,
        "lora": {
            "targets": list(config.lora_targets),
            "rank": config.lora_rank,
            "alpha": config.lora_alpha,
        },
        "steps": config.steps,
        "learning_rate": config.learning_rate,
        "resolution": config.resolution,
        "per_device_batch": config.per_device_batch,
        "devices": config.devices,
        "effective_batch": config.effective_batch,
        "caption_sampling": config.caption_sampling,
        "seed": config.seed,
        "manifest": config.manifest,
        "overrides": {k: list(v) if isinstance(v, tuple) else v for k, v in config.overrides.items()},
    }
    Path(path).write_text(yaml.safe_dump(doc, sort_keys=False), encoding="utf-8")


def read_config(path: str | Path) -> TrainConfig:
    doc = yaml.safe_load(Path(path).read_text(encoding="utf-8"))
    lora = doc.pop("lora")
    effective = doc.pop("effective_batch")
    config = TrainConfig(
        lora_targets=tuple(lora["targets"]),
        lora_rank=lora["rank"],
        lora_alpha=lora["alpha"],
        **doc,
    )
    if effective != config.effective_batch:
        raise TrainerError(
            f"effective_batch {effective} != per_device_batch x devices {config.effective_batch}"
        )
    config.validate()
    return config


# ---------------------------------------------------------------------------
# smoke-scale model pair
# ---------------------------------------------------------------------------


def _hash_tokens(text: str, max_tokens: int = 32) -> list[int]:
    # crc32 keeps token ids stable across processes and platforms.
    return [zlib.crc32(w.encode("utf-8")) % _VOCAB for w in text.lower().split()[:max_tokens]]


class TinyTextEncoder(nn.Module):
    def __init__(self, dim: int = _DIM):
        super().__init__()
        self.embed = nn.Embedding(_VOCAB, dim)
        self.embed.weight.requires_grad_(False)
        self.proj = nn.Linear(dim, dim)

    def forward(self, token_ids: torch.Tensor) -> torch.Tensor:
        return self.proj(self.embed(token_ids).mean(dim=1))


class TinyDenoiser(nn.Module):
    def __init__(self, dim: int = _DIM, cond_dim: int = _DIM):
        super().__init__()
        self.time_proj = nn.Linear(dim, dim)
        self.cond_proj = nn.Linear(cond_dim, dim)
        self.conv_in = nn.Conv2d(3, dim, 3, padding=1)
        self.conv_mid = nn.Conv2d(dim, dim, 3, padding=1)
        self.conv_out = nn.Conv2d(dim, 3, 3, padding=1)
        self.norm1 = nn.GroupNorm(4, dim)
        self.norm2 = nn.GroupNorm(4, dim)
        half = dim // 2
        self.register_buffer(
            "freqs", torch.exp(-math.log(10_000.0) * torch.arange(half) / max(1, half - 1))
        )

    def forward(self, x: torch.Tensor, t: torch.Tensor, cond: torch.Tensor) -> torch.Tensor:
        angles = t[:, None].float() * self.freqs[None, :]
        t_feat = torch.cat([angles.sin(), angles.cos()], dim=1)
        bias = (self.time_proj(t_feat) + self.cond_proj(cond))[:, :, None, None]
        h = F.silu(self.norm1(self.conv_in(x) + bias))
        h = F.silu(self.norm2(self.conv_mid(h)))
        return self.conv_out(h)


def load_training_pairs(manifest_path: str | Path) -> list[tuple[str, tuple[str, ...]]]:
    """Parse the export JSONL (either all-captions or one-per-image shape)."""
    pairs = []
    with open(manifest_path, encoding="utf-8") as f:
        for line_no, line in enumerate(f, start=1):
            if not line.strip():
                continue
            doc = json.loads(line)
            captions = tuple(doc["captions"]) if "captions" in doc else (doc["caption"],)
            if not captions:
                raise TrainerError(f"{manifest_path}:{line_no}: empty caption set")
            pairs.append((doc["image_path"], captions))
    if not pairs:
        raise TrainerError(f"{manifest_path}: no training pairs")
    return pairs


def _load_latents(pairs, resolution: int, images_root: Path) -> torch.Tensor:
    latents = []
    for image_path, _ in pairs:
        path = Path(image_path)
        if not path.is_absolute():
            path = images_root / path
        img = Image.open(path).convert("RGB").resize((resolution, resolution), Image.BILINEAR)
        x = torch.from_numpy(np.array(img)).permute(2, 0, 1).float() / 127.5 - 1.0
        latents.append(F.avg_pool2d(x.unsqueeze(0), 8).squeeze(0))
    return torch.stack(latents)


@dataclass
class TrainResult:
    checkpoint_path: Path
    losses: list[float]
    caption_counts: Counter
    steps: int


def train(config: TrainConfig, out_dir: str | Path, images_root: str | Path = ".") -> TrainResult:
    """Run the configured fine-tune; returns losses and the checkpoint path.

    Caption choice is uniform per image per step; the draw counts are
    returned so sampling behavior stays observable.
    """
    config.validate()
    if config.backend == "sd21":
        raise TrainerError(
            "the sd21 backend needs the pretrained SD 2.1 checkpoint, the diffusers "
            "library, and multi-GPU hardware; none are available at desk scale. "
            "Use backend='smoke' for a runnable verification pass."
        )
    if config.backend != "smoke":
        raise TrainerError(f"unknown backend {config.backend!r}; expected 'sd21' or 'smoke'")

    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    pairs = load_training_pairs(config.manifest)
    latents = _load_latents(pairs, config.resolution, Path(images_root))

    torch.manual_seed(config.seed)
    text_encoder = TinyTextEncoder()
    denoiser = TinyDenoiser()
    trainable: list[nn.Parameter] = []
    if "text_encoder" in config.lora_targets:
        apply_lora(text_encoder, config.lora_rank, config.lora_alpha)
        trainable += list(lora_parameters(text_encoder))
    if "unet" in config.lora_targets:
        apply_lora(denoiser, config.lora_rank, config.lora_alpha)
        trainable += list(lora_parameters(denoiser))
    if not trainable:
        raise TrainerError("no lora targets selected; nothing to train")

    # constant learning rate, Adam, LoRA parameters only
    optimizer = torch.optim.Adam(trainable, lr=config.learning_rate)
    betas = torch.linspace(1e-4, 0.02, _TIMESTEPS)
    alpha_bar = torch.cumprod(1.0 - betas, dim=0)

    g = torch.Generator().manual_seed(config.seed)
    batch = config.effective_batch
    token_cache = {
        (i, k): torch.tensor(_hash_tokens(caption) or [0], dtype=torch.long)
        for i, (_, captions) in enumerate(pairs)
        for k, caption in enumerate(captions)
    }

    losses: list[float] = []
    caption_counts: Counter = Counter()
    for step in range(config.steps):
        idx = torch.randint(len(pairs), (batch,), generator=g)
        token_batches = []
        for i in idx.tolist():
            n_captions = len(pairs[i][1])
            k = int(torch.randint(n_captions, (1,), generator=g))
            caption_counts[(pairs[i][0], k)] += 1
            token_batches.append(token_cache[(i, k)])
        max_len = max(t.numel() for t in token_batches)
        tokens = torch.stack([F.pad(t, (0, max_len - t.numel())) for t in token_batches])

        x0 = latents[idx]
        t = torch.randint(_TIMESTEPS, (batch,), generator=g)
        noise = torch.randn(x0.shape, generator=g)
        ab = alpha_bar[t][:, None, None, None]
        noisy = ab.sqrt() * x0 + (1.0 - ab).sqrt() * noise

        predicted = denoiser(noisy, t, text_encoder(tokens))
        loss = F.mse_loss(predicted, noise)
        optimizer.zero_grad()
        loss.backward()
        optimizer.step()

        losses.append(float(loss.detach()))
        if not math.isfinite(losses[-1]):
            raise TrainerError(f"non-finite loss at step {step}")
        if (step + 1) % config.log_every == 0:
            log.info("step %d/%d loss %.5f", step + 1, config.steps, losses[-1])

    checkpoint_path = out_dir / "checkpoint.pt"
    torch.save(
        {
            "lora_text_encoder": lora_state_dict(text_encoder),
            "lora_denoiser": lora_state_dict(denoiser),
            "config": {**asdict(config), "lora_targets": list(config.lora_targets)},
            "steps": config.steps,
        },
        checkpoint_path,
    )
    (out_dir / "metrics.json").write_text(
        json.dumps(
            {
                "losses": losses,
                "caption_draws": {f"{p}#{k}": n for (p, k), n in sorted(caption_counts.items())},
            },
            indent=2,
        )
        + "\n",
        encoding="utf-8",
    )
    return TrainResult(
        checkpoint_path=checkpoint_path, losses=losses, caption_counts=caption_counts, steps=config.steps
    )
