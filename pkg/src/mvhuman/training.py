"""Joint v-prediction training of the dual-branch model, in two stages.

Stage 1 trains the reference model and the denoiser with multi-view
attention disabled, on single random target views. Stage 2 enables hybrid
multi-view attention over all N views of a subject and trains only the
1D/3D attention parameters; everything else is frozen.
"""

from __future__ import annotations

from dataclasses import dataclass

import torch

from .conditioning import extract_reference_features
from .denoiser import DenoiseConditions, DualBranchDenoiser, denoise
from .schedule import DiffusionSchedule


@dataclass
class NormalizationStats:
    """Per-channel affine map taking normal latents to RGB latent statistics.

    Computed once over the training set and stored with the model.
    """

    normal_mean: list[float]
    normal_std: list[float]
    rgb_mean: list[float]
    rgb_std: list[float]

    @classmethod
    def from_latents(cls, normal_latents: torch.Tensor,
                     rgb_latents: torch.Tensor) -> "NormalizationStats":
        """Stats over (..., C, H, W) stacks of training latents."""
        def chan_stats(x: torch.Tensor) -> tuple[list[float], list[float]]:
            flat = x.reshape(-1, x.shape[-3], x.shape[-1] * x.shape[-2])
            flat = flat.permute(1, 0, 2).reshape(x.shape[-3], -1).double()
            return (flat.mean(1).tolist(),
                    flat.std(1, unbiased=False).clamp(min=1e-6).tolist())

        n_mean, n_std = chan_stats(normal_latents)
        r_mean, r_std = chan_stats(rgb_latents)
        return cls(n_mean, n_std, r_mean, r_std)

    def _coef(self, x: torch.Tensor) -> tuple[torch.Tensor, ...]:
        # Channel axis is dim -3 for (..., C, H, W) tensors.
        def as_t(v):
            return torch.as_tensor(v, dtype=x.dtype).reshape(-1, 1, 1)
        return tuple(as_t(v) for v in (self.normal_mean, self.normal_std,
                                       self.rgb_mean, self.rgb_std))

    def normalize(self, normal_latent: torch.Tensor) -> torch.Tensor:
        nm, ns, rm, rs = self._coef(normal_latent)
        return (normal_latent - nm) / ns * rs + rm

    def denormalize(self, latent: torch.Tensor) -> torch.Tensor:
        nm, ns, rm, rs = self._coef(latent)
        return (latent - rm) / rs * ns + nm

    def to_dict(self) -> dict:
        return {"normal_mean": self.normal_mean, "normal_std": self.normal_std,
                "rgb_mean": self.rgb_mean, "rgb_std": self.rgb_std}

    @classmethod
    def from_dict(cls, d: dict) -> "NormalizationStats":
        return cls(d["normal_mean"], d["normal_std"], d["rgb_mean"], d["rgb_std"])

    @classmethod
    def identity(cls, channels: int = 3) -> "NormalizationStats":
        z, o = [0.0] * channels, [1.0] * channels
        return cls(z, o, z, o)


@dataclass
class TrainingSample:
    """Tensors for one subject as the training loss consumes them.

    Latents are in [-1, 1] image scale; normal latents already normalized.
    """

    rgb_latents: torch.Tensor        # (N, C, R, R)
    normal_latents: torch.Tensor     # (N, C, R, R)
    guidance_seg: torch.Tensor       # (N, P+1, Rg, Rg) one-hot
    guidance_normal: torch.Tensor    # (N, 3, Rg, Rg) in [-1, 1]
    ref_rgb_latent: torch.Tensor     # (C, R, R)
    ref_normal_latent: torch.Tensor  # (C, R, R)
    rotations: torch.Tensor          # (N, 3, 3) relative to the reference view


def training_loss(model: DualBranchDenoiser, ref_model: DualBranchDenoiser,
                  sample: TrainingSample, schedule: DiffusionSchedule,
                  *, rng: torch.Generator | None = None,
                  view_indices: list[int] | None = None,
                  dropout_ratio: float = 0.1, mv_enabled: bool = False,
                  fixed: dict | None = None) -> torch.Tensor:
    """Mean of the two branch v-prediction squared errors for one subject.

    Noise is sampled independently per branch; pose guidance is dropped for
    both branches jointly with probability dropout_ratio. Passing `fixed`
    (keys t, eps_rgb, eps_normal, drop) makes the loss deterministic for
    gradient checks.
    """
    views = view_indices if view_indices is not None else list(range(sample.rgb_latents.shape[0]))
    x0 = sample.rgb_latents[views].unsqueeze(0)
    n0 = sample.normal_latents[views].unsqueeze(0)
    rots = sample.rotations[views].unsqueeze(0)
    seg = sample.guidance_seg[views].unsqueeze(0)
    nrm = sample.guidance_normal[views].unsqueeze(0)

    if fixed is not None:
        t = torch.as_tensor(fixed["t"], dtype=torch.long).reshape(1)
        eps_x = fixed["eps_rgb"]
        eps_n = fixed["eps_normal"]
        drop = bool(fixed.get("drop", False))
    else:
        t = torch.randint(0, schedule.T, (1,), generator=rng)
        eps_x = torch.randn(x0.shape, generator=rng, dtype=x0.dtype)
        eps_n = torch.randn(n0.shape, generator=rng, dtype=n0.dtype)
        drop = torch.rand((), generator=rng).item() < dropout_ratio

    x_t = schedule.add_noise(x0, t, eps_x)
    n_t = schedule.add_noise(n0, t, eps_n)
    v_x = schedule.v_target(x0, eps_x, t)
    v_n = schedule.v_target(n0, eps_n, t)

    cache = extract_reference_features(ref_model,
                                       sample.ref_rgb_latent.unsqueeze(0),
                                       sample.ref_normal_latent.unsqueeze(0))
    cond = DenoiseConditions(ref_cache=cache, rotations=rots,
                             guidance_rgb=None if drop else seg,
                             guidance_normal=None if drop else nrm)
    v_hat_x, v_hat_n = denoise(model, x_t, n_t, t, cond, mv_enabled=mv_enabled)
    loss_rgb = torch.mean((v_hat_x - v_x) ** 2)
    loss_normal = torch.mean((v_hat_n - v_n) ** 2)
    return 0.5 * (loss_rgb + loss_normal)


def parameter_checksums(model: torch.nn.Module) -> dict[str, float]:
    """Stable per-parameter fingerprints for freeze-contract tests."""
    return {name: float(p.detach().double().sum()) for name, p in model.named_parameters()}


def train_stage1(model: DualBranchDenoiser, ref_model: DualBranchDenoiser,
                 samples: list[TrainingSample], schedule: DiffusionSchedule,
                 *, steps: int, batch_size: int, lr: float, seed: int,
                 dropout_ratio: float = 0.1,
                 log_every: int = 25) -> list[dict]:
    """Train reference + denoiser (multi-view attention off) on single views."""
    model.train()
    ref_model.train()
    for p in (*model.parameters(), *ref_model.parameters()):
        p.requires_grad_(True)
    opt = torch.optim.Adam([*model.parameters(), *ref_model.parameters()], lr=lr)
    rng = torch.Generator().manual_seed(seed)
    n_views = samples[0].rgb_latents.shape[0]

    curve = []
    for step in range(steps):
        opt.zero_grad()
        total = 0.0
        for _ in range(batch_size):
            s_idx = int(torch.randint(0, len(samples), (1,), generator=rng))
            v_idx = int(torch.randint(0, n_views, (1,), generator=rng))
            loss = training_loss(model, ref_model, samples[s_idx], schedule,
                                 rng=rng, view_indices=[v_idx],
                                 dropout_ratio=dropout_ratio, mv_enabled=False)
            (loss / batch_size).backward()
            total += float(loss.detach())
        opt.step()
        if step % log_every == 0 or step + 1 == steps:
            curve.append({"stage": 1, "step": step, "loss": total / batch_size})
    return curve


def train_stage2(model: DualBranchDenoiser, ref_model: DualBranchDenoiser,
                 samples: list[TrainingSample], schedule: DiffusionSchedule,
                 *, steps: int, batch_size: int, lr: float, seed: int,
                 dropout_ratio: float = 0.1,
                 log_every: int = 25) -> list[dict]:
    """Train only the 1D/3D multi-view attention parameters on all-view targets."""
    mv_names = model.multiview_parameter_names()
    trainable = []
    for name, p in model.named_parameters():
        p.requires_grad_(name in mv_names)
        if name in mv_names:
            trainable.append(p)
    ref_model.eval()
    for p in ref_model.parameters():
        p.requires_grad_(False)
    model.train()
    opt = torch.optim.Adam(trainable, lr=lr)
    rng = torch.Generator().manual_seed(seed)

    curve = []
    for step in range(steps):
        opt.zero_grad()
        total = 0.0
        for _ in range(batch_size):
            s_idx = int(torch.randint(0, len(samples), (1,), generator=rng))
            loss = training_loss(model, ref_model, samples[s_idx], schedule,
                                 rng=rng, dropout_ratio=dropout_ratio,
                                 mv_enabled=True)
            (loss / batch_size).backward()
            total += float(loss.detach())
        opt.step()
        if step % log_every == 0 or step + 1 == steps:
            curve.append({"stage": 2, "step": step, "loss": total / batch_size})
    # Leave the model in a consistent fully-trainable state for later stages.
    for p in model.parameters():
        p.requires_grad_(True)
    return curve
