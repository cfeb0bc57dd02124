"""Training loop, evaluation, finite-difference gradient check and file-level wrappers."""

from __future__ import annotations

import math
import time
from dataclasses import dataclass, field, fields, replace
from pathlib import Path
from typing import Callable, Sequence

import numpy as np

from . import datagen, metrics
from . import tensor as T
from .datagen import Dataset, Scene, SceneSpec
from .errors import ConfigurationError, NumericalError, ParseError, UsageError
from .metrics import MetricsReport
from .model import BACKBONE_STRIDE, Framework, NetworkConfig, build, forward, load_checkpoint, save_checkpoint
from .tensor import Tensor


class Adam:
    """Bias-corrected Adam over a fixed list of parameter tensors."""

    def __init__(self, params: Sequence[Tensor], lr: float = 1e-5, beta1: float = 0.9, beta2: float = 0.999,
                 eps: float = 1e-8):
        if lr < 0:
            raise ConfigurationError(f"learning rate must be >= 0, got {lr}")
        self.params = list(params)
        self.lr, self.beta1, self.beta2, self.eps = lr, beta1, beta2, eps
        self.t = 0
        self.m = [np.zeros_like(p.data) for p in self.params]
        self.v = [np.zeros_like(p.data) for p in self.params]

    def step(self) -> None:
        self.t += 1
        b1, b2 = self.beta1, self.beta2
        c1, c2 = 1 - b1 ** self.t, 1 - b2 ** self.t
        for p, m, v in zip(self.params, self.m, self.v):
            if p.grad is None:
                continue
            g = p.grad
            m *= b1
            m += (1 - b1) * g
            v *= b2
            v += (1 - b2) * g * g
            if self.lr:
                p.data -= self.lr * (m / c1) / (np.sqrt(v / c2) + self.eps)


# ------------------------------------------------------------------ config


@dataclass
class TrainConfig:
    network: NetworkConfig
    epochs: int
    lr: float = 1e-5
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    batch_size: int = 1
    seed: int = 0
    dataset: str | None = None
    checkpoint_interval: int = 0
    out_dir: str | None = None
    max_steps: int | None = None
    density_mode: str = "adaptive"
    sigma: float = 2.0
    train_split: str = "train"
    val_split: str = "val"
    lr_decay: str = "none"

    def __post_init__(self):
        # lr == 0 is accepted as a null-update probe
        if not (self.lr >= 0 and math.isfinite(self.lr)):
            raise ConfigurationError(f"lr must be a finite value >= 0, got {self.lr}")
        if self.epochs < 1:
            raise ConfigurationError(f"epochs must be >= 1, got {self.epochs}")
        if self.batch_size < 1:
            raise ConfigurationError(f"batch_size must be >= 1, got {self.batch_size}")
        if self.checkpoint_interval < 0:
            raise ConfigurationError("checkpoint_interval must be >= 0")
        if self.max_steps is not None and self.max_steps < 1:
            raise ConfigurationError("max_steps must be >= 1")
        if self.lr_decay not in ("none", "linear"):
            raise ConfigurationError(f"lr_decay must be 'none' or 'linear', got {self.lr_decay!r}")

    def to_dict(self) -> dict[str, str]:
        out = {f"network.{k}": v for k, v in self.network.to_dict().items()}
        for f in fields(self):
            if f.name != "network":
                v = getattr(self, f.name)
                out[f.name] = repr(v) if isinstance(v, float) else str(v)
        return out

    @classmethod
    def from_dict(cls, d: dict[str, str]) -> "TrainConfig":
        net = {k.split(".", 1)[1]: v for k, v in d.items() if k.startswith("network.")}
        rest = {k: v for k, v in d.items() if not k.startswith("network.")}
        types = {f.name: f.type for f in fields(cls) if f.name != "network"}
        unknown = sorted(set(rest) - set(types))
        if unknown:
            raise ConfigurationError(f"unknown training config keys {unknown}; valid: {sorted(types)}")
        kw: dict = {}
        for key, raw in rest.items():
            raw = str(raw).strip()
            typ = str(types[key])
            try:
                if raw == "None" and "None" in typ:
                    kw[key] = None
                elif typ.startswith("int"):
                    kw[key] = int(raw)
                elif typ.startswith("float"):
                    kw[key] = float(raw)
                else:
                    kw[key] = raw
            except ValueError as exc:
                raise ConfigurationError(f"bad value for {key}: {raw!r} ({exc})") from None
        if "epochs" not in kw:
            raise ConfigurationError("epochs is required")
        return cls(network=NetworkConfig.from_dict(net), **kw)


@dataclass
class RunRecord:
    epoch_losses: list[float]
    step_losses: list[float]
    validation: MetricsReport | None
    wall_time: float
    config: dict[str, str]
    seed: int
    steps: int = 0
    checkpoints: list[str] = field(default_factory=list)
    model: Framework | None = field(default=None, repr=False)

    def to_text(self) -> str:
        lines = [f"{k}={v}" for k, v in self.config.items()]
        lines.append(f"seed={self.seed}")
        lines.append(f"steps={self.steps}")
        lines += [f"epoch {i} loss {v!r}" for i, v in enumerate(self.epoch_losses)]
        if self.validation is not None:
            lines += [f"val {s} {k} {v!r}" for s, k, v in self.validation.rows()]
        lines.append(f"wall_time {self.wall_time:.3f}")
        return "\n".join(lines) + "\n"


# ------------------------------------------------------------------ data plumbing


def _resolve(data) -> list[Scene]:
    if data is None:
        raise UsageError("no dataset given")
    if isinstance(data, (str, Path)):
        data = datagen.load_dataset(data)
    if isinstance(data, Dataset):
        return list(data.scenes)
    return list(data)


def stride_of(cfg: NetworkConfig) -> int:
    return BACKBONE_STRIDE[cfg.backbone]


def target_for(scene: Scene, cfg: NetworkConfig, mode: str = "adaptive", sigma: float = 2.0) -> Tensor:
    return datagen.density_map(scene.annotations, mode=mode, stride=stride_of(cfg), sigma=sigma).tensor


def inputs_for(scenes: Sequence[Scene], cfg: NetworkConfig) -> list[Tensor]:
    out = []
    for m in cfg.modalities:
        missing = [s.name for s in scenes if m not in s.images]
        if missing:
            raise UsageError(f"scenes {missing[:3]} have no {m!r} image")
        arrs = [s.images[m].data for s in scenes]
        out.append(Tensor(arrs[0] if len(arrs) == 1 else np.concatenate(arrs, axis=0)))
    return out


def predict(fw: Framework, scene: Scene) -> Tensor:
    with T.no_grad():
        return forward(fw, inputs_for([scene], fw.config))


# ------------------------------------------------------------------ training


def train(cfg: TrainConfig, data=None) -> RunRecord:
    """Run ``cfg.epochs`` epochs of Adam on the training split; returns the run record.

    ``data`` overrides ``cfg.dataset`` and may be a path, a Dataset or a list of scenes. Scenes whose
    split equals ``cfg.train_split`` are trained on; when none carry that tag, every scene is used.
    """
    t0 = time.perf_counter()
    scenes = _resolve(data if data is not None else cfg.dataset)
    train_set = [s for s in scenes if s.split == cfg.train_split] or scenes
    val_set = [s for s in scenes if s.split == cfg.val_split]
    if not train_set:
        raise UsageError("training set is empty")
    sizes = {s.annotations.height * 100000 + s.annotations.width for s in train_set}
    if cfg.batch_size > 1 and len(sizes) > 1:
        raise UsageError("batch_size > 1 needs scenes of a single size")

    net = cfg.network
    fw = build(net)
    params = fw.parameters()
    opt = Adam(params, cfg.lr, cfg.beta1, cfg.beta2, cfg.eps)
    targets = {id(s): target_for(s, net, cfg.density_mode, cfg.sigma).data for s in train_set}
    rng = np.random.default_rng([cfg.seed, 0x5EED])
    out_dir = Path(cfg.out_dir) if cfg.out_dir else None
    if out_dir is not None:
        out_dir.mkdir(parents=True, exist_ok=True)

    record = RunRecord([], [], None, 0.0, cfg.to_dict(), cfg.seed, model=fw)
    last_good: str | None = None
    step = 0
    per_epoch = -(-len(train_set) // cfg.batch_size)
    total = min(cfg.max_steps or per_epoch * cfg.epochs, per_epoch * cfg.epochs)
    for epoch in range(cfg.epochs):
        order = rng.permutation(len(train_set))
        batches = [order[i:i + cfg.batch_size] for i in range(0, len(order), cfg.batch_size)]
        losses = []
        for idx in batches:
            if cfg.max_steps is not None and step >= cfg.max_steps:
                break
            batch = [train_set[i] for i in idx]
            target = Tensor(np.concatenate([targets[id(s)] for s in batch], axis=0))
            fw.zero_grad()
            loss = T.mse_loss(forward(fw, inputs_for(batch, net)), target)
            value = loss.item()
            if not math.isfinite(value):
                ref = last_good or "none written yet"
                raise NumericalError(
                    f"non-finite loss {value} at epoch {epoch}, step {step}; last good checkpoint: {ref}")
            loss.backward()
            if cfg.lr_decay == "linear":
                opt.lr = cfg.lr * (1.0 - step / total)
            opt.step()
            step += 1
            losses.append(value)
            record.step_losses.append(value)
        if losses:
            record.epoch_losses.append(math.fsum(losses) / len(losses))
        if out_dir is not None and cfg.checkpoint_interval and (epoch + 1) % cfg.checkpoint_interval == 0:
            path = out_dir / f"epoch_{epoch:04d}.ckpt"
            save_checkpoint(path, fw, step, {"epoch": str(epoch)})
            record.checkpoints.append(str(path))
            last_good = str(path)
        if cfg.max_steps is not None and step >= cfg.max_steps:
            break

    record.steps = step
    if val_set:
        record.validation = evaluate(fw, val_set, density_mode=cfg.density_mode, sigma=cfg.sigma)
    if out_dir is not None:
        final = out_dir / "final.ckpt"
        save_checkpoint(final, fw, step, {"epoch": str(len(record.epoch_losses) - 1)})
        record.checkpoints.append(str(final))
        if record.validation is not None:
            record.validation.to_csv(out_dir / "val_metrics.csv")
    record.wall_time = time.perf_counter() - t0
    if out_dir is not None:
        (out_dir / "run.log").write_text(record.to_text())
    return record


# ------------------------------------------------------------------ evaluation


def evaluate(checkpoint, dataset, config: NetworkConfig | None = None, *, split: str | None = None,
             csv_path=None, pgm_dir=None, density_mode: str = "adaptive", sigma: float = 2.0) -> MetricsReport:
    """Metrics of a model (checkpoint path or in-memory Framework) over every scene of ``dataset``."""
    if isinstance(checkpoint, Framework):
        fw = checkpoint
        if config is not None and fw.config.diff(config):
            raise ConfigurationError(f"model/config mismatch in {fw.config.diff(config)}")
    else:
        fw, _ = load_checkpoint(checkpoint, expected=config)
    scenes = _resolve(dataset)
    if split is not None:
        scenes = [s for s in scenes if s.split == split]
    if not scenes:
        raise UsageError("cannot evaluate on an empty dataset")
    preds, gts, tags = [], [], []
    for s in scenes:
        p = predict(fw, s)
        preds.append(p.data[0, 0])
        gts.append(target_for(s, fw.config, density_mode, sigma).data[0, 0])
        tags.append(s.annotations.illumination)
    rep = metrics.report(preds, gts, tags)
    if csv_path is not None:
        rep.to_csv(csv_path)
    if pgm_dir is not None:
        pgm_dir = Path(pgm_dir)
        pgm_dir.mkdir(parents=True, exist_ok=True)
        for s, p in zip(scenes, preds):
            export_map(p, pgm_dir / f"{s.name}.pgm")
    return rep


# ------------------------------------------------------------------ gradient check


@dataclass
class GradEntry:
    layer: str
    index: tuple[int, ...]
    analytic: float
    numeric: float
    rel_err: float
    passed: bool

    def __str__(self) -> str:
        flag = "ok  " if self.passed else "FAIL"
        return (f"{flag} {self.layer}{list(self.index)} analytic={self.analytic:.10e} "
                f"numeric={self.numeric:.10e} rel_err={self.rel_err:.3e}")


@dataclass
class GradcheckReport:
    entries: list[GradEntry]
    tol: float
    wall_time: float = 0.0
    skipped: list = field(default_factory=list)

    @property
    def passed(self) -> bool:
        return all(e.passed for e in self.entries)

    @property
    def failures(self) -> list[GradEntry]:
        return [e for e in self.entries if not e.passed]

    @property
    def max_rel_err(self) -> float:
        return max((e.rel_err for e in self.entries), default=0.0)

    @property
    def layers(self) -> set[str]:
        return {e.layer for e in self.entries}

    def __str__(self) -> str:
        head = (f"gradcheck {'PASS' if self.passed else 'FAIL'}: {len(self.entries)} coordinates, "
                f"max rel err {self.max_rel_err:.3e} (tol {self.tol:g}), {len(self.skipped)} resampled at kinks, "
                f"{self.wall_time:.1f}s")
        return "\n".join([head, *map(str, self.failures)])


def check_gradients(loss_fn: Callable[[], Tensor], params: Sequence[Tensor], coords: Sequence[tuple[int, tuple]],
                    step: float = 1e-5, tol: float = 1e-4, floor: float = 1e-6,
                    rng: np.random.Generator | None = None, retries: int = 20,
                    min_entries: int = 0) -> GradcheckReport:
    """Compare backprop gradients with central differences at ``coords`` = [(param index, element index)].

    Relative error is |a - n| / max(|a|, |n|, floor). A coordinate whose +-step
    perturbation flips any ReLU mask or max-pool argmax sits within ``step`` of a
    kink, where central differences are not a valid oracle; it is moved to
    ``skipped`` and, given ``rng``, replaced by another coordinate of the same tensor.
    With ``rng``, random coordinates are added until ``min_entries`` were checked.
    """
    t0 = time.perf_counter()
    for p in params:
        p.grad = None
    with T.trace_pattern() as base:
        loss_fn().backward()
    grads = [np.zeros_like(p.data) if p.grad is None else p.grad.copy() for p in params]

    def evaluate_at(pi, idx, delta):
        p = params[pi]
        orig = p.data[idx]
        p.data[idx] = orig + delta
        try:
            with T.trace_pattern() as rec:
                value = loss_fn().item()
        finally:
            p.data[idx] = orig
        return value, rec == base

    entries, skipped = [], []
    queue = list(coords)
    with T.no_grad():
        while queue:
            pi, idx = queue.pop(0)
            for _ in range(retries + 1):
                up, same_up = evaluate_at(pi, idx, step)
                down, same_down = evaluate_at(pi, idx, -step)
                if same_up and same_down:
                    break
                skipped.append((params[pi].name, idx))
                if rng is None:
                    idx = None
                    break
                idx = tuple(int(rng.integers(d)) for d in params[pi].shape)
            else:
                idx = None
            if idx is None:
                continue
            num = (up - down) / (2 * step)
            ana = float(grads[pi][idx])
            rel = abs(ana - num) / max(abs(ana), abs(num), floor)
            entries.append(GradEntry(params[pi].name or f"param{pi}", tuple(int(i) for i in idx), ana, num, rel,
                                     rel < tol))
            if not queue and rng is not None and len(entries) < min_entries:
                queue.extend(sample_coords(params, 0, rng, extra=min_entries - len(entries)))
    return GradcheckReport(entries, tol, time.perf_counter() - t0, skipped)


def sample_coords(params: Sequence[Tensor], samples: int, rng: np.random.Generator,
                  extra: int | None = None) -> list[tuple[int, tuple]]:
    """One coordinate per tensor, then size-weighted random coordinates up to ``samples``.

    With ``extra``, returns exactly that many size-weighted coordinates instead.
    """
    coords = [] if extra is not None else [(i, tuple(int(rng.integers(d)) for d in p.shape))
                                            for i, p in enumerate(params)]
    sizes = np.array([p.size for p in params], dtype=np.float64)
    while len(coords) < (samples if extra is None else extra):
        i = int(rng.choice(len(params), p=sizes / sizes.sum()))
        coords.append((i, tuple(int(rng.integers(d)) for d in params[i].shape)))
    return coords


def rescale_for_gradcheck(fw: Framework, rng: np.random.Generator, gain: float = 1.2, gate_gain: float = 0.1,
                          gate_bias: float = 0.3) -> None:
    """Redraw parameters so every layer carries an O(1), mostly-active signal.

    At the training init (std 1e-2, zero bias) activations shrink by orders of
    magnitude per layer and whole branches sit in the dead ReLU region, which
    makes a finite-difference check vacuous. Gate convolutions get small weights
    and a positive bias, keeping the multiplicative gating near-linear in scale.
    """
    for p in fw.parameters():
        is_gate = ".gate_" in (p.name or "")
        if p.name.endswith(".weight"):
            fan_in = int(np.prod(p.shape[1:]))
            g = gate_gain if is_gate else gain
            p.data[...] = rng.normal(0.0, g / math.sqrt(fan_in), size=p.shape)
        elif is_gate:
            p.data[...] = gate_bias + rng.normal(0.0, 0.05, size=p.shape)
        else:
            p.data[...] = rng.uniform(0.0, 0.2, size=p.shape)


def gradcheck(cfg: NetworkConfig, samples: int = 200, *, height: int = 24, width: int = 24, step: float = 1e-5,
              tol: float = 1e-4, seed: int = 0, rescale: bool = True,
              fault: Callable[[Framework], None] | None = None) -> GradcheckReport:
    """Finite-difference check of a whole network under an MSE loss against a random target.

    ``fault`` may wrap parts of the built network before checking (used to inject bad gradients).
    """
    if cfg.dtype != "float64":
        raise ConfigurationError("gradcheck requires dtype=float64")
    fw = build(cfg)
    rng = np.random.default_rng([seed, 0x6C])
    xs = [Tensor(rng.uniform(0, 1, size=(1, cfg.channels_of(m), height, width))) for m in cfg.modalities]
    s = stride_of(cfg)
    target = Tensor(rng.uniform(0, 1, size=(1, 1, -(-height // s), -(-width // s))))
    if rescale:
        # redraw until most output cells are active, otherwise every gradient is trivially zero
        for _ in range(20):
            rescale_for_gradcheck(fw, rng)
            with T.no_grad():
                if (forward(fw, xs).data > 0).mean() >= 0.5:
                    break
        else:
            raise NumericalError("gradcheck could not find a parameter draw with a live output")
    if fault is not None:
        fault(fw)
    params = fw.parameters()
    coords = sample_coords(params, samples, rng)
    return check_gradients(lambda: T.mse_loss(forward(fw, xs), target), params, coords, step, tol, rng=rng,
                           min_entries=samples)


# ------------------------------------------------------------------ file wrappers


def export_map(arr, path) -> None:
    """PGM of a density map plus ``<path>.txt`` holding its count."""
    a = metrics.as_map(arr)
    path = Path(path)
    datagen.write_pgm(path, a)
    path.with_suffix(path.suffix + ".txt").write_text(f"count {float(a.sum())!r}\n")


def export_density(checkpoint, scene: Scene | str | Path, out) -> float:
    fw, _ = load_checkpoint(checkpoint)
    if not isinstance(scene, Scene):
        scene = load_scene(scene)
    pred = predict(fw, scene)
    export_map(pred, out)
    return float(pred.data.sum())


def load_scene(ref) -> Scene:
    """``dataset_dir`` (first scene) or ``dataset_dir:scene_name``."""
    ref = str(ref)
    root, _, name = ref.rpartition(":") if ":" in ref and not Path(ref).exists() else (ref, "", "")
    ds = datagen.load_dataset(root)
    if not ds.scenes:
        raise UsageError(f"dataset {root} holds no scenes")
    if not name:
        return ds.scenes[0]
    for s in ds.scenes:
        if s.name == name:
            return s
    raise UsageError(f"no scene {name!r} in {root}")


def synth(spec: SceneSpec | str | Path | None, n_scenes: int, out_dir, *, seed: int | None = None,
          dark_fraction: float = 0.5, val_fraction: float = 0.0, random_shift: bool = True) -> list[Scene]:
    """Generate ``n_scenes`` scenes and write them as a dataset directory."""
    if n_scenes < 0:
        raise UsageError(f"n_scenes must be >= 0, got {n_scenes}")
    if spec is None:
        spec = SceneSpec()
    elif not isinstance(spec, SceneSpec):
        spec = SceneSpec.from_dict(read_kv(spec))
    seed = spec.seed if seed is None else seed
    scenes = datagen.make_scenes(n_scenes, spec, seed=seed, dark_fraction=dark_fraction, random_shift=random_shift)
    n_val = int(round(n_scenes * val_fraction))
    if n_val:
        # interleave so both illumination halves reach validation
        val_idx = set(np.linspace(0, n_scenes - 1, n_val).round().astype(int).tolist())
        scenes = [replace(s, split="val") if i in val_idx else s for i, s in enumerate(scenes)]
    datagen.save_dataset(out_dir, scenes, ["rgb", spec.second_modality])
    return scenes


def read_kv(path) -> dict[str, str]:
    """key=value lines; blank lines and ``#`` comments ignored."""
    out = {}
    path = Path(path)
    try:
        text = path.read_text()
    except OSError as exc:
        raise UsageError(f"cannot read config file {path}: {exc.strerror}") from None
    for line_no, line in enumerate(text.splitlines(), start=1):
        line = line.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise ParseError(f"expected key=value, got {line!r}", path=path, line=line_no)
        k, v = line.split("=", 1)
        out[k.strip()] = v.strip()
    return out
