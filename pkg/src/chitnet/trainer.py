"""Alternating two-phase training.

Iterations are grouped into blocks of ``phase_block``; even blocks train the
transfer branch (phase M) with both auxiliary branches frozen, odd blocks train
the auxiliary branches (phase S) with the transfer branch frozen and its fused
output used as a constant label.
"""
from __future__ import annotations

import dataclasses
import logging
import os
from dataclasses import dataclass, fields
from pathlib import Path
from typing import Any, Sequence

import numpy as np
import torch
import torch.nn as nn

from .blocks import set_frozen
from .checkpoint import CheckpointError, load_into_module, load_tensors, save_tensors
from .imaging import ImageValidationError, crop_patches
from .losses import loss_inter, loss_mit, siphia_bundle
from .network import CHITNet, NetSpec

log = logging.getLogger(__name__)

OPTIMIZERS = ("mit_first", "mit_later", "siphia_ir", "siphia_vis")


class ConfigError(ValueError):
    pass


class TrainingDiverged(RuntimeError):
    pass


@dataclass
class TrainConfig:
    channels: int = 32
    rdb_layers: int = 4
    growth: int = 0  # 0 means "same as channels"
    patch_size: int = 120
    batch_size: int = 8
    iteration_maximum: int = 1000
    phase_block: int = 200
    lambda_edge: float = 20.0
    lambda_jg: float = 20.0
    seed: int = 0
    lr_mit_phase1: float = 1e-3
    lr_mit_phase2: float = 1e-5
    lr_siphia: float = 1e-3
    lr_decay1_frac: float = 0.1
    lr_decay2_frac: float = 0.4
    lr_decay1_factor: float = 0.1
    lr_decay2_factor: float = 1e-4
    adam_beta1: float = 0.9
    adam_beta2: float = 0.999
    grad_clip: float = 10.0
    dataset: str = ""
    use_mit: bool = True
    use_siphia: bool = True
    use_mptp: bool = True
    use_rec: bool = True
    use_grad: bool = True
    use_en: bool = True

    def validate(self) -> "TrainConfig":
        for name in ("lr_mit_phase1", "lr_mit_phase2", "lr_siphia", "lr_decay1_factor", "lr_decay2_factor"):
            if not getattr(self, name) > 0:
                raise ConfigError(f"{name} must be > 0")
        for name in ("batch_size", "phase_block", "iteration_maximum", "patch_size", "rdb_layers"):
            if getattr(self, name) < 1:
                raise ConfigError(f"{name} must be >= 1")
        if self.lambda_edge < 0 or self.lambda_jg < 0:
            raise ConfigError("lambda_edge and lambda_jg must be >= 0")
        if self.channels < 2 or self.channels % 2:
            raise ConfigError("channels must be an even number >= 2")
        if not 0 <= self.lr_decay1_frac <= self.lr_decay2_frac:
            raise ConfigError("need 0 <= lr_decay1_frac <= lr_decay2_frac")
        if not (0 <= self.adam_beta1 < 1 and 0 <= self.adam_beta2 < 1):
            raise ConfigError("adam betas must lie in [0, 1)")
        return self

    def net_spec(self) -> NetSpec:
        return NetSpec(self.channels, self.rdb_layers, self.growth or None, self.use_mit, self.use_siphia)

    def to_dict(self) -> dict[str, Any]:
        return dataclasses.asdict(self)


def _parse_value(raw: str, kind: type, key: str):
    raw = raw.strip()
    if kind is bool:
        low = raw.lower()
        if low in ("1", "true", "yes", "on"):
            return True
        if low in ("0", "false", "no", "off"):
            return False
        raise ConfigError(f"{key}: expected a boolean, got {raw!r}")
    try:
        return kind(raw)
    except ValueError:
        raise ConfigError(f"{key}: cannot parse {raw!r} as {kind.__name__}") from None


def parse_config(text: str, base: TrainConfig | None = None) -> TrainConfig:
    """Parse flat ``key = value`` lines; ``#`` starts a comment."""
    types = {f.name: {"int": int, "float": float, "bool": bool, "str": str}[f.type] for f in fields(TrainConfig)}
    values = (base or TrainConfig()).to_dict()
    for n, line in enumerate(text.splitlines(), 1):
        line = line.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise ConfigError(f"line {n}: expected key=value, got {line!r}")
        key, raw = (s.strip() for s in line.split("=", 1))
        if key not in types:
            raise ConfigError(f"unknown config key: {key}")
        values[key] = _parse_value(raw, types[key], key)
    return TrainConfig(**values).validate()


def load_config(path: str | os.PathLike) -> TrainConfig:
    cfg = parse_config(Path(path).read_text())
    if cfg.dataset and not os.path.isabs(cfg.dataset):
        cfg.dataset = str((Path(path).parent / cfg.dataset).resolve())
    return cfg


def phase_select(iteration: int, phase_block: int) -> str:
    if iteration < 0:
        raise ValueError("iteration must be >= 0")
    return "M" if (iteration // phase_block) % 2 == 0 else "S"


def lr_schedule(iteration: int, phase: str, config: TrainConfig) -> float:
    """Piecewise-constant rate: per-phase base, decayed at fixed fractions of the run."""
    if phase == "M":
        first = iteration // config.phase_block == 0
        base = config.lr_mit_phase1 if first else config.lr_mit_phase2
    elif phase == "S":
        base = config.lr_siphia
    else:
        raise ValueError(f"unknown phase {phase!r}")
    return base * decay_factor(iteration, config)


def decay_factor(iteration: int, config: TrainConfig) -> float:
    if iteration >= round(config.lr_decay2_frac * config.iteration_maximum):
        return config.lr_decay2_factor
    if iteration >= round(config.lr_decay1_frac * config.iteration_maximum):
        return config.lr_decay1_factor
    return 1.0


def format_log_line(iteration: int, phase: str, values: dict[str, float]) -> str:
    parts = [f"iter={iteration}", f"phase={phase}"]
    parts += [f"{k}={v:.9g}" if isinstance(v, float) else f"{k}={v}" for k, v in values.items()]
    return " ".join(parts)


def parse_log(path: str | os.PathLike) -> list[dict[str, Any]]:
    records = []
    for line in Path(path).read_text().splitlines():
        if not line.strip():
            continue
        rec: dict[str, Any] = {}
        for tok in line.split():
            k, v = tok.split("=", 1)
            if k == "iter":
                rec[k] = int(v)
            elif k == "phase":
                rec[k] = v
            else:
                rec[k] = float(v)
        records.append(rec)
    return records


Dataset = Sequence[tuple[str, np.ndarray, np.ndarray]]


class Trainer:
    def __init__(self, config: TrainConfig, dataset: Dataset, out_dir: str | os.PathLike | None = None):
        self.config = config.validate()
        if not dataset:
            raise ImageValidationError("dataset is empty")
        p = config.patch_size
        for name, ir, vis in dataset:
            if ir.shape != vis.shape:
                raise ImageValidationError(f"{name}: ir {ir.shape} vs vis {vis.shape}")
            if min(ir.shape) < p:
                raise ImageValidationError(f"{name}: image {ir.shape} smaller than patch {p}")
        self.dataset = list(dataset)
        self.out_dir = Path(out_dir) if out_dir is not None else None
        self.model = CHITNet(config.net_spec(), seed=config.seed)
        self.model.train()
        betas = (config.adam_beta1, config.adam_beta2)
        mit_params = list(self.model.mit.parameters())
        self.optimizers: dict[str, torch.optim.Optimizer] = {
            "mit_first": torch.optim.Adam(mit_params, lr=config.lr_mit_phase1, betas=betas),
            "mit_later": torch.optim.Adam(mit_params, lr=config.lr_mit_phase2, betas=betas),
        }
        if self.model.siphia_ir is not None:
            self.optimizers["siphia_ir"] = torch.optim.Adam(self.model.siphia_ir.parameters(), lr=config.lr_siphia, betas=betas)
            self.optimizers["siphia_vis"] = torch.optim.Adam(self.model.siphia_vis.parameters(), lr=config.lr_siphia, betas=betas)
        self.iteration = 0

    # -- data -------------------------------------------------------------
    def batch(self, iteration: int) -> tuple[torch.Tensor, torch.Tensor, list[str]]:
        """Deterministic batch for ``iteration``: depends only on (seed, iteration)."""
        rng = np.random.default_rng([self.config.seed, iteration])
        idx = rng.integers(0, len(self.dataset), size=self.config.batch_size)
        irs, viss, ids = [], [], []
        for i in idx.tolist():
            name, ir, vis = self.dataset[i]
            (pp,) = crop_patches(ir, vis, self.config.patch_size, 1, int(rng.integers(2**62)), source_id=name)
            irs.append(pp.ir_raw)
            viss.append(pp.vis_raw)
            ids.append(f"{name}@{pp.offset[0]},{pp.offset[1]}")
        as_t = lambda xs: torch.from_numpy(np.stack(xs)[:, None]).float()
        return as_t(irs), as_t(viss), ids

    # -- steps ------------------------------------------------------------
    def _dual(self, x: torch.Tensor) -> torch.Tensor:
        return torch.cat([x, 1.0 - x], dim=1)

    def _check_finite(self, loss: torch.Tensor, iteration: int, ids: list[str], ir, vis) -> None:
        if torch.isfinite(loss):
            return
        msg = f"non-finite loss at iteration {iteration}; batch {ids}"
        if self.out_dir is not None:
            dump = self.out_dir / f"diverged_iter{iteration:06d}.npz"
            dump.parent.mkdir(parents=True, exist_ok=True)
            np.savez(dump, ir=ir.numpy(), vis=vis.numpy(), ids=np.array(ids))
            msg += f"; batch dumped to {dump}"
        raise TrainingDiverged(msg)

    def _set_lr(self, name: str, lr: float) -> None:
        for g in self.optimizers[name].param_groups:
            g["lr"] = lr

    def _update(self, loss: torch.Tensor, names: Sequence[str], params: list[nn.Parameter]) -> None:
        for n in OPTIMIZERS:
            if n in self.optimizers:
                self.optimizers[n].zero_grad(set_to_none=True)
        loss.backward()
        torch.nn.utils.clip_grad_norm_([p for p in params if p.grad is not None], self.config.grad_clip)
        for n in names:
            self.optimizers[n].step()

    def train_step_M(self, ir, vis, ids, iteration: int) -> dict[str, float]:
        model, cfg = self.model, self.config
        set_frozen(model.mit, False)
        for s in model.siphia_modules():
            set_frozen(s, True)
        name = "mit_first" if iteration // cfg.phase_block == 0 else "mit_later"
        lr = lr_schedule(iteration, "M", cfg)
        self._set_lr(name, lr)
        out = model(self._dual(ir), self._dual(vis))
        bundle = loss_mit(out.fused, ir, vis, cfg.lambda_jg)
        self._check_finite(bundle["mit_total"], iteration, ids, ir, vis)
        self._update(bundle["mit_total"], [name], list(model.mit.parameters()))
        return {k: v.item() for k, v in bundle.items()} | {"lr": lr}

    def train_step_S(self, ir, vis, ids, iteration: int) -> dict[str, float]:
        model, cfg = self.model, self.config
        set_frozen(model.mit, True)
        for s in model.siphia_modules():
            set_frozen(s, False)
        lr = lr_schedule(iteration, "S", cfg)
        self._set_lr("siphia_ir", lr)
        self._set_lr("siphia_vis", lr)
        with torch.no_grad():
            frozen = model(self._dual(ir), self._dual(vis))
        s_ir = model.siphia_ir(frozen.mit.f_vis2ir)
        s_vis = model.siphia_vis(frozen.mit.f_ir2vis)
        flags = dict(use_rec=cfg.use_rec, use_grad=cfg.use_grad, use_en=cfg.use_en)
        b_ir = siphia_bundle(s_ir, ir, vis, cfg.lambda_edge, **flags)
        b_vis = siphia_bundle(s_vis, ir, vis, cfg.lambda_edge, **flags)
        inter = loss_inter(frozen.fused, s_ir.rec_en, s_vis.rec_en)
        siphia_total = b_ir["siphia_total"] + b_vis["siphia_total"]
        total = siphia_total + inter
        self._check_finite(total, iteration, ids, ir, vis)
        params = [p for s in model.siphia_modules() for p in s.parameters()]
        self._update(total, ["siphia_ir", "siphia_vis"], params)
        values = {k: (b_ir[k] + b_vis[k]).item() for k in ("rec", "grad", "en")}
        values |= {"siphia_total": siphia_total.item(), "inter": inter.item(), "total": total.item(), "lr": lr}
        return values

    def train_step_joint(self, ir, vis, ids, iteration: int) -> dict[str, float]:
        """End-to-end step used when the alternating schedule is switched off."""
        model, cfg = self.model, self.config
        set_frozen(model, False)
        lr_m = cfg.lr_mit_phase1 * decay_factor(iteration, cfg)
        lr_s = lr_schedule(iteration, "S", cfg)
        self._set_lr("mit_first", lr_m)
        names = ["mit_first"]
        out = model(self._dual(ir), self._dual(vis))
        bundle = loss_mit(out.fused, ir, vis, cfg.lambda_jg)
        total = bundle["mit_total"]
        values = {k: v.item() for k, v in bundle.items()}
        if out.siphia_ir is not None:
            flags = dict(use_rec=cfg.use_rec, use_grad=cfg.use_grad, use_en=cfg.use_en)
            s = [siphia_bundle(o, ir, vis, cfg.lambda_edge, **flags) for o in (out.siphia_ir, out.siphia_vis)]
            siphia_total = s[0]["siphia_total"] + s[1]["siphia_total"]
            total = total + siphia_total
            values["siphia_total"] = siphia_total.item()
            self._set_lr("siphia_ir", lr_s)
            self._set_lr("siphia_vis", lr_s)
            names += ["siphia_ir", "siphia_vis"]
        self._check_finite(total, iteration, ids, ir, vis)
        self._update(total, names, list(model.parameters()))
        values |= {"total": total.item(), "joint": 1, "lr": lr_m}
        return values

    def step(self) -> tuple[str, dict[str, float]]:
        it = self.iteration
        ir, vis, ids = self.batch(it)
        phase = phase_select(it, self.config.phase_block)
        if not self.config.use_mptp:
            phase, values = "M", self.train_step_joint(ir, vis, ids, it)
        elif phase == "M":
            values = self.train_step_M(ir, vis, ids, it)
        elif self.model.siphia_ir is None:
            values = {"skipped": 1}
        else:
            values = self.train_step_S(ir, vis, ids, it)
        self.iteration += 1
        if self.out_dir is not None:
            self.out_dir.mkdir(parents=True, exist_ok=True)
            with open(self.out_dir / "loss.log", "a") as fh:
                fh.write(format_log_line(it, phase, values) + "\n")
        return phase, values

    def run(self, until: int | None = None) -> None:
        stop = self.config.iteration_maximum if until is None else min(until, self.config.iteration_maximum)
        while self.iteration < stop:
            phase, values = self.step()
            if self.iteration % 50 == 0 or self.iteration == stop:
                log.info("iter %d phase %s %s", self.iteration, phase,
                         " ".join(f"{k}={v:.4g}" for k, v in values.items()))
            if self.out_dir is not None and self.iteration % self.config.phase_block == 0:
                self.save(self.out_dir / f"ckpt_{self.iteration:06d}.chit")
        if self.out_dir is not None and self.iteration >= self.config.iteration_maximum:
            self.save(self.out_dir / "final.chit")

    # -- checkpoints ------------------------------------------------------
    def state_tensors(self) -> tuple[dict[str, torch.Tensor], dict[str, Any]]:
        tensors = {f"model.{k}": v for k, v in self.model.state_dict().items()}
        optim_meta = {}
        for name, opt in self.optimizers.items():
            sd = opt.state_dict()
            for idx, st in sd["state"].items():
                for field, val in st.items():
                    tensors[f"optim.{name}.{idx}.{field}"] = val if torch.is_tensor(val) else torch.tensor(val)
            groups = []
            for g in sd["param_groups"]:
                groups.append({k: (list(v) if isinstance(v, tuple) else v) for k, v in g.items()})
            optim_meta[name] = {"param_groups": groups}
        meta = {
            "kind": "chitnet-checkpoint",
            "iteration": self.iteration,
            "config": self.config.to_dict(),
            "permutations": self.model.permutations,
            "optimizers": optim_meta,
        }
        return tensors, meta

    def save(self, path: str | os.PathLike) -> Path:
        tensors, meta = self.state_tensors()
        save_tensors(path, tensors, meta)
        return Path(path)

    def load_state(self, path: str | os.PathLike) -> None:
        tensors, meta = load_tensors(path)
        if meta.get("kind") != "chitnet-checkpoint":
            raise CheckpointError(f"{path}: not a training checkpoint")
        saved = TrainConfig(**meta["config"])
        if saved.net_spec() != self.config.net_spec():
            raise CheckpointError(f"model shape mismatch: checkpoint {saved.net_spec()} vs config {self.config.net_spec()}")
        if self.model.siphia_ir is not None:
            for mod, perm in zip(self.model.siphia_modules(), meta["permutations"]):
                mod.perm.copy_(torch.tensor(perm))
        load_into_module(self.model, tensors, "model.")
        for name, opt in self.optimizers.items():
            prefix = f"optim.{name}."
            state: dict[int, dict[str, torch.Tensor]] = {}
            for k, v in tensors.items():
                if k.startswith(prefix):
                    idx, field = k[len(prefix):].split(".", 1)
                    state.setdefault(int(idx), {})[field] = v
            groups = []
            for g in meta["optimizers"][name]["param_groups"]:
                g = dict(g)
                g["betas"] = tuple(g["betas"])
                groups.append(g)
            opt.load_state_dict({"state": state, "param_groups": groups})
        self.iteration = int(meta["iteration"])

    @classmethod
    def resume(cls, path, config: TrainConfig, dataset: Dataset, out_dir=None) -> "Trainer":
        trainer = cls(config, dataset, out_dir)
        trainer.load_state(path)
        return trainer


def train(config: TrainConfig, dataset: Dataset, out_dir: str | os.PathLike | None = None,
          resume: str | os.PathLike | None = None) -> Trainer:
    trainer = Trainer.resume(resume, config, dataset, out_dir) if resume else Trainer(config, dataset, out_dir)
    trainer.run()
    return trainer


def load_model(path: str | os.PathLike) -> tuple[CHITNet, dict[str, Any]]:
    """Rebuild the network from a checkpoint (training or parameter-only)."""
    tensors, meta = load_tensors(path)
    cfg = TrainConfig(**meta["config"])
    perms = meta.get("permutations") or None
    model = CHITNet(cfg.net_spec(), seed=cfg.seed, perms=perms)
    load_into_module(model, tensors, "model.")
    model.eval()
    return model, meta
