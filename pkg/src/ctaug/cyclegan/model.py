"""Two-domain CycleGAN: model state, one training step, inference and checkpoints.

Domain A is ``normal`` and domain B is ``covid``; ``g_ab`` maps A to B.
"""

from __future__ import annotations

import io
import itertools
import math
import random
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Callable

import torch
from torch import nn

from ..errors import DataError, TrainingError
from .losses import CycleGanLossWeights, adversarial_loss, cycle_loss, identity_loss
from .networks import DiscriminatorSpec, Generator, GeneratorSpec, PatchDiscriminator, init_weights

CHECKPOINT_HEADER = b"CYGAN-CKPT-v1\n"
DIRECTIONS = ("a_to_b", "b_to_a")


class ReplayBuffer:
    """Pool of past fakes shown to the discriminators.

    Until full, every incoming image is stored and returned. Afterwards each
    image is, with probability 1/2, swapped for a random stored one.
    """

    def __init__(self, capacity: int = 50, seed: int = 0):
        if capacity < 0:
            raise ValueError("capacity must be non-negative")
        self.capacity = capacity
        self.images: list[torch.Tensor] = []
        self._rng = random.Random(seed)

    def __len__(self):
        return len(self.images)

    def query(self, batch: torch.Tensor) -> torch.Tensor:
        if self.capacity == 0:
            return batch
        out = []
        for img in batch.detach():
            img = img.clone()
            if len(self.images) < self.capacity:
                self.images.append(img)
                out.append(img)
            elif self._rng.random() < 0.5:
                j = self._rng.randrange(self.capacity)
                out.append(self.images[j])
                self.images[j] = img
            else:
                out.append(img)
        return torch.stack(out)


@dataclass
class CycleGanModel:
    g_ab: Generator
    g_ba: Generator
    d_a: PatchDiscriminator
    d_b: PatchDiscriminator
    buffer_a: ReplayBuffer
    buffer_b: ReplayBuffer
    step: int = 0

    @classmethod
    def build(cls, gen_spec: GeneratorSpec, disc_spec: DiscriminatorSpec | None = None,
              buffer_capacity: int = 50, seed: int = 0) -> "CycleGanModel":
        if disc_spec is None:
            disc_spec = DiscriminatorSpec(input_dim=gen_spec.input_dim, base_width=gen_spec.base_width,
                                          channels=gen_spec.channels)
        if disc_spec.input_dim != gen_spec.input_dim or disc_spec.channels != gen_spec.channels:
            raise ValueError("generator and discriminator must agree on input_dim and channels")
        disc_spec.grid_dim  # raises for inputs too small for the patch stack
        gen = torch.Generator().manual_seed(seed)
        nets = [Generator(gen_spec), Generator(gen_spec), PatchDiscriminator(disc_spec), PatchDiscriminator(disc_spec)]
        for net in nets:
            init_weights(net, generator=gen)
        return cls(*nets, ReplayBuffer(buffer_capacity, seed + 1), ReplayBuffer(buffer_capacity, seed + 2))

    @property
    def gen_spec(self) -> GeneratorSpec:
        return self.g_ab.spec

    @property
    def disc_spec(self) -> DiscriminatorSpec:
        return self.d_a.spec

    @property
    def device(self) -> torch.device:
        return next(self.g_ab.parameters()).device

    def generators(self):
        return itertools.chain(self.g_ab.parameters(), self.g_ba.parameters())

    def discriminators(self):
        return itertools.chain(self.d_a.parameters(), self.d_b.parameters())

    def to(self, *args, **kwargs) -> "CycleGanModel":
        for net in (self.g_ab, self.g_ba, self.d_a, self.d_b):
            net.to(*args, **kwargs)
        return self


@dataclass
class CycleGanOptim:
    """Adam for both generators, Adam for both discriminators, linear decay."""

    g_opt: torch.optim.Optimizer
    d_opt: torch.optim.Optimizer
    schedulers: list = field(default_factory=list)

    @classmethod
    def build(cls, model: CycleGanModel, lr: float = 2e-4, betas=(0.5, 0.999),
              total_steps: int | None = None, decay_start: int | None = None) -> "CycleGanOptim":
        g_opt = torch.optim.Adam(model.generators(), lr=lr, betas=betas)
        d_opt = torch.optim.Adam(model.discriminators(), lr=lr, betas=betas)
        schedulers = []
        if total_steps:
            start = total_steps // 2 if decay_start is None else decay_start
            span = max(1, total_steps - start)

            def factor(i: int) -> float:
                return 1.0 if i < start else max(0.0, 1.0 - (i - start) / span)

            schedulers = [torch.optim.lr_scheduler.LambdaLR(o, factor) for o in (g_opt, d_opt)]
        return cls(g_opt, d_opt, schedulers)


def _set_requires_grad(nets, flag: bool) -> None:
    for net in nets:
        for p in net.parameters():
            p.requires_grad_(flag)


def generator_losses(model: CycleGanModel, real_a: torch.Tensor, real_b: torch.Tensor,
                     weights: CycleGanLossWeights) -> tuple[torch.Tensor, dict, torch.Tensor, torch.Tensor]:
    """Total generator objective plus its terms and the two fake batches."""
    fake_b = model.g_ab(real_a)
    fake_a = model.g_ba(real_b)
    terms = {
        "adv_ab": adversarial_loss(model.d_b(fake_b), True),
        "adv_ba": adversarial_loss(model.d_a(fake_a), True),
        "cycle_a": cycle_loss(real_a, model.g_ba(fake_b)),
        "cycle_b": cycle_loss(real_b, model.g_ab(fake_a)),
    }
    total = terms["adv_ab"] + terms["adv_ba"] + weights.lambda_cycle * (terms["cycle_a"] + terms["cycle_b"])
    if weights.lambda_identity > 0:
        terms["idt_a"] = identity_loss(real_a, model.g_ba(real_a))
        terms["idt_b"] = identity_loss(real_b, model.g_ab(real_b))
        total = total + weights.lambda_identity * (terms["idt_a"] + terms["idt_b"])
    return total, terms, fake_a, fake_b


def _check_finite(losses: dict) -> None:
    for name, value in losses.items():
        if not math.isfinite(value):
            raise TrainingError(f"non-finite CycleGAN loss term {name!r}: {value}")


def train_step(model: CycleGanModel, batch_a: torch.Tensor, batch_b: torch.Tensor,
               weights: CycleGanLossWeights, opt: CycleGanOptim) -> dict[str, float]:
    spec = model.gen_spec
    for name, batch in (("batch_a", batch_a), ("batch_b", batch_b)):
        if batch.ndim != 4 or tuple(batch.shape[1:]) != (spec.channels, spec.input_dim, spec.input_dim):
            raise DataError(f"{name} has shape {tuple(batch.shape)}, expected (N, {spec.channels}, "
                            f"{spec.input_dim}, {spec.input_dim})")
    batch_a, batch_b = batch_a.to(model.device), batch_b.to(model.device)
    for net in (model.g_ab, model.g_ba, model.d_a, model.d_b):
        net.train()

    _set_requires_grad((model.d_a, model.d_b), False)
    opt.g_opt.zero_grad(set_to_none=True)
    g_total, terms, fake_a, fake_b = generator_losses(model, batch_a, batch_b, weights)
    losses = {k: float(v.detach()) for k, v in terms.items()}
    losses["g_total"] = float(g_total.detach())
    _check_finite(losses)
    g_total.backward()
    opt.g_opt.step()

    _set_requires_grad((model.d_a, model.d_b), True)
    opt.d_opt.zero_grad(set_to_none=True)
    pool_a = model.buffer_a.query(fake_a)
    pool_b = model.buffer_b.query(fake_b)
    d_a = 0.5 * (adversarial_loss(model.d_a(batch_a), True) + adversarial_loss(model.d_a(pool_a), False))
    d_b = 0.5 * (adversarial_loss(model.d_b(batch_b), True) + adversarial_loss(model.d_b(pool_b), False))
    d_losses = {"d_a": float(d_a.detach()), "d_b": float(d_b.detach())}
    _check_finite(d_losses)
    (d_a + d_b).backward()
    opt.d_opt.step()

    for sched in opt.schedulers:
        sched.step()
    model.step += 1
    losses.update(d_losses)
    losses["cycle"] = losses["cycle_a"] + losses["cycle_b"]
    return losses


@torch.no_grad()
def translate(model: CycleGanModel, imgs: torch.Tensor, direction: str) -> torch.Tensor:
    if direction not in DIRECTIONS:
        raise ValueError(f"direction must be one of {DIRECTIONS}, got {direction!r}")
    spec = model.gen_spec
    if imgs.ndim != 4 or tuple(imgs.shape[1:]) != (spec.channels, spec.input_dim, spec.input_dim):
        raise DataError(f"images have shape {tuple(imgs.shape)}, expected (N, {spec.channels}, "
                        f"{spec.input_dim}, {spec.input_dim})")
    gen = model.g_ab if direction == "a_to_b" else model.g_ba
    was_training = gen.training
    gen.eval()
    try:
        return gen(imgs.to(model.device)).cpu()
    finally:
        gen.train(was_training)


def fit(model: CycleGanModel, images_a: torch.Tensor, images_b: torch.Tensor, steps: int,
        weights: CycleGanLossWeights | None = None, batch_size: int = 1, lr: float = 2e-4,
        seed: int = 0, opt: CycleGanOptim | None = None,
        on_step: Callable[[int, dict], None] | None = None) -> list[dict[str, float]]:
    """Run ``steps`` unpaired training steps, sampling each domain independently."""
    weights = weights or CycleGanLossWeights()
    opt = opt or CycleGanOptim.build(model, lr=lr, total_steps=steps)
    if len(images_a) == 0 or len(images_b) == 0:
        raise DataError("both domains need at least one training image")
    gen = torch.Generator().manual_seed(seed)
    history = []
    for i in range(steps):
        ia = torch.randint(len(images_a), (batch_size,), generator=gen)
        ib = torch.randint(len(images_b), (batch_size,), generator=gen)
        losses = train_step(model, images_a[ia], images_b[ib], weights, opt)
        history.append(losses)
        if on_step is not None:
            on_step(i, losses)
    return history


def save_checkpoint(model: CycleGanModel, path, opt: CycleGanOptim | None = None, extra: dict | None = None) -> None:
    payload = {
        "gen_spec": asdict(model.gen_spec),
        "disc_spec": asdict(model.disc_spec),
        "buffer_capacity": model.buffer_a.capacity,
        "step": model.step,
        "g_ab": model.g_ab.state_dict(),
        "g_ba": model.g_ba.state_dict(),
        "d_a": model.d_a.state_dict(),
        "d_b": model.d_b.state_dict(),
        "g_opt": opt.g_opt.state_dict() if opt else None,
        "d_opt": opt.d_opt.state_dict() if opt else None,
        "extra": extra or {},
    }
    buf = io.BytesIO()
    torch.save(payload, buf)
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    tmp = path.with_suffix(path.suffix + ".tmp")
    tmp.write_bytes(CHECKPOINT_HEADER + buf.getvalue())
    tmp.replace(path)


def load_checkpoint(path) -> tuple[CycleGanModel, dict]:
    """Returns the model and the raw payload (optimizer states, ``extra``)."""
    path = Path(path)
    if not path.is_file():
        raise DataError(f"CycleGAN checkpoint not found: {path}")
    blob = path.read_bytes()
    if not blob.startswith(CHECKPOINT_HEADER):
        raise DataError(f"{path}: not a CYGAN-CKPT-v1 checkpoint")
    payload = torch.load(io.BytesIO(blob[len(CHECKPOINT_HEADER):]), map_location="cpu", weights_only=True)
    model = CycleGanModel.build(GeneratorSpec(**payload["gen_spec"]), DiscriminatorSpec(**payload["disc_spec"]),
                                buffer_capacity=payload["buffer_capacity"])
    for name in ("g_ab", "g_ba", "d_a", "d_b"):
        net: nn.Module = getattr(model, name)
        net.load_state_dict(payload[name])
    model.step = int(payload["step"])
    return model, payload
