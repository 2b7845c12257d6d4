"""MLP feature extractor with one softmax head per ontology level.

Parameters live in a flat ``dict`` keyed ``f{i}.W`` / ``f{i}.b`` for
extractor layers and ``g{t}.W`` / ``g{t}.b`` for the level-``t`` head. All
math is float64 so finite-difference checks stay meaningful.
"""

from __future__ import annotations

import enum
import json
from dataclasses import dataclass, field
from pathlib import Path
from typing import Sequence

import numpy as np


class InitStrategy(str, enum.Enum):
    TRAIN_SCRATCH = "TrainScratch"
    FINETUNE_PREV = "FinetunePrev"
    FREEZE_PREV = "FreezePrev"


class NonFiniteError(FloatingPointError):
    pass


def softmax(logits: np.ndarray) -> np.ndarray:
    shifted = logits - logits.max(axis=-1, keepdims=True)
    e = np.exp(shifted)
    return e / e.sum(axis=-1, keepdims=True)


def glorot(fan_in: int, fan_out: int, rng: np.random.Generator) -> np.ndarray:
    limit = np.sqrt(6.0 / (fan_in + fan_out))
    return rng.uniform(-limit, limit, size=(fan_in, fan_out))


@dataclass
class ExtractorCache:
    inputs: list[np.ndarray]
    pre: list[np.ndarray]
    z: np.ndarray


@dataclass
class Model:
    input_dim: int
    hidden: tuple[int, ...]
    level_sizes: tuple[int, ...]
    params: dict[str, np.ndarray]
    ema: dict[str, np.ndarray] = field(default_factory=dict)
    velocity: dict[str, np.ndarray] = field(default_factory=dict)
    frozen_extractor: bool = False
    provenance: str = ""

    def __post_init__(self):
        self.hidden = tuple(int(h) for h in self.hidden)
        self.level_sizes = tuple(int(s) for s in self.level_sizes)
        if not self.ema:
            self.reset_ema()

    # -- structure ---------------------------------------------------------------------

    @property
    def depth(self) -> int:
        return len(self.hidden)

    @property
    def feature_dim(self) -> int:
        return self.hidden[-1] if self.hidden else self.input_dim

    @property
    def level(self) -> int:
        """Index of the newest (finest) head."""
        return len(self.level_sizes) - 1

    def extractor_names(self) -> list[str]:
        return [f"f{i}.{p}" for i in range(self.depth) for p in ("W", "b")]

    def head_names(self, level: int) -> list[str]:
        return [f"g{level}.W", f"g{level}.b"]

    def trainable_names(self) -> list[str]:
        if self.frozen_extractor:
            return self.head_names(self.level)
        return list(self.params)

    def has_head(self, level: int) -> bool:
        return 0 <= level < len(self.level_sizes)

    def _weights(self, use_ema: bool) -> dict[str, np.ndarray]:
        return self.ema if use_ema else self.params

    # -- forward / backward --------------------------------------------------------

    def extract(self, x: np.ndarray, use_ema: bool = False) -> tuple[np.ndarray, ExtractorCache]:
        w = self._weights(use_ema)
        h = np.asarray(x, dtype=np.float64)
        if h.shape[-1] != self.input_dim:
            raise ValueError(f"input has {h.shape[-1]} features, model expects {self.input_dim}")
        inputs, pre = [], []
        for i in range(self.depth):
            inputs.append(h)
            a = h @ w[f"f{i}.W"] + w[f"f{i}.b"]
            pre.append(a)
            h = np.maximum(a, 0.0)
        return h, ExtractorCache(inputs, pre, h)

    def head_logits(self, z: np.ndarray, level: int, use_ema: bool = False) -> np.ndarray:
        if not self.has_head(level):
            raise KeyError(f"model has no head for level {level}")
        w = self._weights(use_ema)
        return z @ w[f"g{level}.W"] + w[f"g{level}.b"]

    def forward(self, x: np.ndarray, level: int, use_ema: bool = False):
        """Returns ``(z, q, logits)`` for a single vector or a batch of rows."""
        if not self.has_head(level):
            raise KeyError(f"model has no head for level {level}")
        z, _ = self.extract(x, use_ema)
        logits = self.head_logits(z, level, use_ema)
        return z, softmax(logits), logits

    def predict_proba(self, x: np.ndarray, level: int, use_ema: bool = False, chunk: int = 4096) -> np.ndarray:
        x = np.asarray(x, dtype=np.float64)
        out = [self.forward(x[i : i + chunk], level, use_ema)[1] for i in range(0, len(x), chunk)]
        return np.concatenate(out) if out else np.empty((0, self.level_sizes[level]))

    def backward(
        self,
        cache: ExtractorCache,
        head_grads: dict[int, np.ndarray],
        names: Sequence[str] | None = None,
    ) -> dict[str, np.ndarray]:
        """Parameter gradients given d(loss)/d(logits) per head (rows aligned with the cache)."""
        wanted = set(self.trainable_names() if names is None else names)
        grads: dict[str, np.ndarray] = {}
        z = cache.z
        dz = None
        for level, dlogits in head_grads.items():
            wname, bname = self.head_names(level)
            if wname in wanted:
                grads[wname] = z.T @ dlogits
                grads[bname] = dlogits.sum(axis=0)
            if self.depth and not self.frozen_extractor:
                contrib = dlogits @ self.params[wname].T
                dz = contrib if dz is None else dz + contrib
        if dz is not None and any(n in wanted for n in self.extractor_names()):
            for i in reversed(range(self.depth)):
                da = dz * (cache.pre[i] > 0)
                grads[f"f{i}.W"] = cache.inputs[i].T @ da
                grads[f"f{i}.b"] = da.sum(axis=0)
                if i:
                    dz = da @ self.params[f"f{i}.W"].T
        for name in wanted:
            if name not in grads:
                grads[name] = np.zeros_like(self.params[name])
        return {n: grads[n] for n in self.params if n in wanted}

    # -- state ---------------------------------------------------------------------------

    def reset_ema(self) -> None:
        self.ema = {k: v.copy() for k, v in self.params.items()}

    def copy(self) -> Model:
        return Model(
            input_dim=self.input_dim,
            hidden=self.hidden,
            level_sizes=self.level_sizes,
            params={k: v.copy() for k, v in self.params.items()},
            ema={k: v.copy() for k, v in self.ema.items()},
            velocity={k: v.copy() for k, v in self.velocity.items()},
            frozen_extractor=self.frozen_extractor,
            provenance=self.provenance,
        )

    def save(self, path: str | Path) -> None:
        """Flat little-endian float64 blob plus a JSON manifest beside it."""
        path = Path(path)
        path.mkdir(parents=True, exist_ok=True)
        entries, offset, blobs = [], 0, []
        for prefix, store in (("param", self.params), ("ema", self.ema)):
            for name, arr in store.items():
                entries.append({"name": f"{prefix}/{name}", "shape": list(arr.shape), "offset": offset})
                offset += arr.size
                blobs.append(np.ascontiguousarray(arr, dtype="<f8").ravel())
        (path / "params.bin").write_bytes(np.concatenate(blobs).tobytes() if blobs else b"")
        manifest = {
            "input_dim": self.input_dim,
            "hidden": list(self.hidden),
            "level_sizes": list(self.level_sizes),
            "frozen_extractor": self.frozen_extractor,
            "provenance": self.provenance,
            "tensors": entries,
        }
        (path / "manifest.json").write_text(json.dumps(manifest, indent=2) + "\n")

    @classmethod
    def load(cls, path: str | Path) -> Model:
        path = Path(path)
        manifest = json.loads((path / "manifest.json").read_text())
        flat = np.frombuffer((path / "params.bin").read_bytes(), dtype="<f8")
        params, ema = {}, {}
        for e in manifest["tensors"]:
            size = int(np.prod(e["shape"], dtype=np.int64))
            arr = flat[e["offset"] : e["offset"] + size].reshape(e["shape"]).astype(np.float64)
            prefix, name = e["name"].split("/", 1)
            (params if prefix == "param" else ema)[name] = arr
        return cls(
            input_dim=manifest["input_dim"],
            hidden=tuple(manifest["hidden"]),
            level_sizes=tuple(manifest["level_sizes"]),
            params=params,
            ema=ema,
            frozen_extractor=manifest["frozen_extractor"],
            provenance=manifest["provenance"],
        )


def _random_head(model_params: dict, level: int, feat: int, size: int, rng: np.random.Generator) -> None:
    model_params[f"g{level}.W"] = glorot(feat, size, rng)
    model_params[f"g{level}.b"] = np.zeros(size)


def init_model(
    input_dim: int,
    level_sizes: Sequence[int],
    rng: np.random.Generator,
    hidden: Sequence[int] = (128, 128),
) -> Model:
    """Fresh model with random extractor and heads for every level in ``level_sizes``."""
    params: dict[str, np.ndarray] = {}
    widths = [int(input_dim), *[int(h) for h in hidden]]
    for i, (fan_in, fan_out) in enumerate(zip(widths[:-1], widths[1:])):
        params[f"f{i}.W"] = glorot(fan_in, fan_out, rng)
        params[f"f{i}.b"] = np.zeros(fan_out)
    for level, size in enumerate(level_sizes):
        _random_head(params, level, widths[-1], int(size), rng)
    return Model(int(input_dim), tuple(hidden), tuple(int(s) for s in level_sizes), params)


def init_for_tp(
    prev_model: Model | None,
    strategy: InitStrategy | str,
    new_head_size: int,
    rng: np.random.Generator,
    *,
    input_dim: int | None = None,
    hidden: Sequence[int] = (128, 128),
    from_ema: bool = True,
) -> Model:
    """Model for the next TP; old heads are always kept.

    TrainScratch re-initializes everything (the architecture is taken from
    ``prev_model`` when given). FinetunePrev and FreezePrev copy the previous
    extractor and heads (its EMA weights by default, i.e. the weights that
    were evaluated) and add a random head; FreezePrev also freezes the
    extractor so only the new head trains.
    """
    strategy = InitStrategy(strategy)
    if prev_model is None:
        if strategy is not InitStrategy.TRAIN_SCRATCH:
            raise ValueError(f"{strategy.value} needs a previous model")
        if input_dim is None:
            raise ValueError("input_dim is required without a previous model")
        model = init_model(input_dim, [new_head_size], rng, hidden)
        model.provenance = strategy.value
        return model

    sizes = (*prev_model.level_sizes, int(new_head_size))
    if strategy is InitStrategy.TRAIN_SCRATCH:
        model = init_model(prev_model.input_dim, sizes, rng, prev_model.hidden)
    else:
        source = prev_model.ema if from_ema else prev_model.params
        params = {k: v.copy() for k, v in source.items()}
        _random_head(params, len(sizes) - 1, prev_model.feature_dim, int(new_head_size), rng)
        model = Model(
            prev_model.input_dim,
            prev_model.hidden,
            sizes,
            params,
            frozen_extractor=strategy is InitStrategy.FREEZE_PREV,
        )
    model.provenance = f"{prev_model.provenance}>{strategy.value}" if prev_model.provenance else strategy.value
    return model


def sgd_step(
    model: Model,
    grads: dict[str, np.ndarray],
    lr: float,
    momentum: float = 0.9,
    weight_decay: float = 0.0,
) -> None:
    """Heavy-ball SGD with L2 decay folded into the gradient. Frozen parameters are skipped."""
    trainable = model.trainable_names()
    for name in trainable:
        if name not in grads:
            continue
        g = grads[name]
        if g.shape != model.params[name].shape:
            raise ValueError(f"gradient for {name} has shape {g.shape}, expected {model.params[name].shape}")
        if not np.all(np.isfinite(g)):
            bad = int(np.count_nonzero(~np.isfinite(g)))
            raise NonFiniteError(f"non-finite gradient in {name} ({bad} entries); aborting")
    for name in trainable:
        if name not in grads:
            continue
        theta = model.params[name]
        step = grads[name] + weight_decay * theta if weight_decay else grads[name]
        v = model.velocity.get(name)
        v = step.copy() if v is None else momentum * v + step
        model.velocity[name] = v
        theta -= lr * v


def ema_update(model: Model, decay: float = 0.999) -> None:
    if decay == 0.0:
        for name, theta in model.params.items():
            model.ema[name][...] = theta
        return
    for name, theta in model.params.items():
        e = model.ema[name]
        # e += (1-d)(theta - e) keeps e == theta a bitwise fixed point
        e += (1.0 - decay) * (theta - e)
