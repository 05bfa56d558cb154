"""Transolver: point encoder, stacked physics-attention layers, decoder.

Each layer soft-assigns the N grid points to S tokens (slice), runs
multi-head self-attention over the tokens, and scatters the result back
(deslice), so attention costs O(N + S^2) instead of O(N^2).  Blocks are
pre-norm with residual connections and a GELU feed-forward, and attention
scores are scaled by 1/sqrt(C/H).

Optional LoRA adapters replace a target matrix W by W + alpha * A @ B with
only A (d x r) and B (r x m) trainable; the base model is frozen while
adapters are attached.
"""

from __future__ import annotations

import hashlib
from dataclasses import dataclass, field
from functools import lru_cache

import numpy as np

from . import autodiff as ad
from . import checkpoint
from .autodiff import Tensor

LN_EPS = 1e-14
SLICE_EPS = 1e-30
CHECKPOINT_KIND = "transolver-model"


@dataclass
class TransolverConfig:
    layers: int = 2
    slices: int = 8
    channels: int = 64
    heads: int = 4
    in_features: int = 3
    ffn_multiplier: int = 2

    def __post_init__(self):
        if self.layers < 1 or self.slices < 1:
            raise ValueError("layers and slices must be >= 1")
        if self.channels % self.heads != 0:
            raise ValueError(f"channels ({self.channels}) not divisible by "
                             f"heads ({self.heads})")

    def to_dict(self) -> dict:
        return {"layers": self.layers, "slices": self.slices,
                "channels": self.channels, "heads": self.heads,
                "in_features": self.in_features,
                "ffn_multiplier": self.ffn_multiplier}


def parameter_count(cfg: TransolverConfig) -> int:
    """Closed-form total parameter count (no adapters)."""
    c, s, f = cfg.channels, cfg.slices, cfg.in_features
    ff = cfg.ffn_multiplier * c
    encoder = f * c + c + c * c + c + 2 * c
    per_layer = (2 * c                      # first layer norm
                 + c * c + c + c * s + s    # slice/weight projections
                 + 3 * (c * c + c)          # Q, K, V
                 + c * c + c                # output projection
                 + 2 * c                    # second layer norm
                 + c * ff + ff + ff * c + c)
    decoder = c * c + c + c + 1
    return encoder + cfg.layers * per_layer + decoder


@dataclass
class LoraAdapter:
    a: Tensor
    b: Tensor
    rank: int
    alpha: float


@lru_cache(maxsize=16)
def grid_coords(nx: int, ny: int) -> np.ndarray:
    """(N, 2) node coordinates, row-major with axis 0 along x."""
    x = np.linspace(0.0, 1.0, nx)
    y = np.linspace(0.0, 1.0, ny)
    xg, yg = np.meshgrid(x, y, indexing="ij")
    coords = np.stack([xg.reshape(-1), yg.reshape(-1)], axis=1)
    coords.setflags(write=False)
    return coords


def grid_features(k: np.ndarray) -> np.ndarray:
    """Per-node features (x, y, k) for a permeability field."""
    nx, ny = k.shape
    return np.concatenate([grid_coords(nx, ny), k.reshape(-1, 1)], axis=1)


class Transolver:
    def __init__(self, config: TransolverConfig, seed: int = 0):
        self.config = config
        self.params: dict[str, Tensor] = {}
        self.adapters: dict[str, LoraAdapter] = {}
        self._init_params(seed)

    # ------------------------------------------------------------------
    # construction

    def _init_params(self, seed: int):
        rng = np.random.Generator(np.random.Philox(key=seed & ((1 << 64) - 1)))
        c, s, f = self.config.channels, self.config.slices, self.config.in_features
        ff = self.config.ffn_multiplier * c

        def mat(name, d, m):
            scale = np.sqrt(2.0 / (d + m))
            self.params[name] = Tensor(rng.normal(0.0, scale, size=(d, m)),
                                       requires_grad=True, name=name)

        def vec(name, m, value=0.0):
            self.params[name] = Tensor(np.full(m, value, dtype=np.float64),
                                       requires_grad=True, name=name)

        mat("encoder.w1", f, c), vec("encoder.b1", c)
        mat("encoder.w2", c, c), vec("encoder.b2", c)
        vec("encoder.ln_gain", c, 1.0), vec("encoder.ln_bias", c)
        for i in range(self.config.layers):
            p = f"layer{i}."
            vec(p + "ln1_gain", c, 1.0), vec(p + "ln1_bias", c)
            mat(p + "wu", c, c), vec(p + "bu", c)
            mat(p + "wm", c, s), vec(p + "bm", s)
            mat(p + "wq", c, c), vec(p + "bq", c)
            mat(p + "wk", c, c), vec(p + "bk", c)
            mat(p + "wv", c, c), vec(p + "bv", c)
            mat(p + "wo", c, c), vec(p + "bo", c)
            vec(p + "ln2_gain", c, 1.0), vec(p + "ln2_bias", c)
            mat(p + "wf1", c, ff), vec(p + "bf1", ff)
            mat(p + "wf2", ff, c), vec(p + "bf2", c)
        mat("decoder.w1", c, c), vec("decoder.b1", c)
        mat("decoder.w2", c, 1), vec("decoder.b2", 1)

    def copy(self) -> "Transolver":
        dup = Transolver.__new__(Transolver)
        dup.config = self.config
        dup.params = {}
        for name, p in self.params.items():
            dup.params[name] = Tensor(p.values.copy(), requires_grad=p.requires_grad,
                                      name=name)
        dup.adapters = {}
        for target, adp in self.adapters.items():
            dup.adapters[target] = LoraAdapter(
                a=Tensor(adp.a.values.copy(), requires_grad=True, name=adp.a.name),
                b=Tensor(adp.b.values.copy(), requires_grad=True, name=adp.b.name),
                rank=adp.rank, alpha=adp.alpha)
        return dup

    # ------------------------------------------------------------------
    # parameter access

    def trainable_parameters(self) -> list[Tensor]:
        out = [p for p in self.params.values() if p.requires_grad]
        for adp in self.adapters.values():
            out.extend([adp.a, adp.b])
        return out

    def trainable_count(self) -> int:
        return sum(p.values.size for p in self.trainable_parameters())

    def all_arrays(self) -> dict[str, np.ndarray]:
        arrays = {name: p.values for name, p in self.params.items()}
        for target, adp in self.adapters.items():
            arrays[target + ".lora_a"] = adp.a.values
            arrays[target + ".lora_b"] = adp.b.values
        return arrays

    def digest(self) -> str:
        h = hashlib.sha256()
        for name in sorted(self.all_arrays()):
            h.update(name.encode())
            h.update(np.ascontiguousarray(self.all_arrays()[name]).tobytes())
        return h.hexdigest()

    def _weight(self, name: str) -> Tensor:
        """Effective weight: base plus alpha * A @ B if an adapter targets it."""
        base = self.params[name]
        adp = self.adapters.get(name)
        if adp is None:
            return base
        return ad.add(base, ad.mul(ad.constant(adp.alpha), ad.matmul(adp.a, adp.b)))

    # ------------------------------------------------------------------
    # forward pieces (Tensor in, Tensor out)

    def encode(self, points: Tensor) -> Tensor:
        if points.values.ndim != 2 or points.values.shape[1] != self.config.in_features:
            raise ValueError(f"points must be (N, {self.config.in_features}), "
                             f"got {points.values.shape}")
        h = ad.gelu(ad.add(ad.matmul(points, self._weight("encoder.w1")),
                           self.params["encoder.b1"]))
        h = ad.add(ad.matmul(h, self._weight("encoder.w2")), self.params["encoder.b2"])
        return ad.layer_norm(h, self.params["encoder.ln_gain"],
                             self.params["encoder.ln_bias"], eps=LN_EPS)

    def slice(self, x: Tensor, layer: int) -> tuple[Tensor, Tensor]:
        """Soft-assign points to S tokens: Z (S x C), weights M (N x S)."""
        p = f"layer{layer}."
        u = ad.add(ad.matmul(x, self._weight(p + "wu")), self.params[p + "bu"])
        logits = ad.add(ad.matmul(x, self._weight(p + "wm")), self.params[p + "bm"])
        m = ad.softmax(logits, axis=-1)
        num = ad.matmul(ad.transpose(m), u)
        den = ad.reshape(ad.reduce_sum(m, axis=0), (self.config.slices, 1))
        z = ad.div(num, ad.add(den, ad.constant(SLICE_EPS)))
        return z, m

    def attend(self, z: Tensor, layer: int) -> Tensor:
        p = f"layer{layer}."
        c, nh = self.config.channels, self.config.heads
        dh = c // nh
        scale = 1.0 / np.sqrt(dh)
        q = ad.add(ad.matmul(z, self._weight(p + "wq")), self.params[p + "bq"])
        k = ad.add(ad.matmul(z, self._weight(p + "wk")), self.params[p + "bk"])
        v = ad.add(ad.matmul(z, self._weight(p + "wv")), self.params[p + "bv"])
        heads = []
        for h in range(nh):
            qh = ad.slice_cols(q, h * dh, (h + 1) * dh)
            kh = ad.slice_cols(k, h * dh, (h + 1) * dh)
            vh = ad.slice_cols(v, h * dh, (h + 1) * dh)
            scores = ad.mul(ad.matmul(qh, ad.transpose(kh)), ad.constant(scale))
            heads.append(ad.matmul(ad.softmax(scores, axis=-1), vh))
        merged = ad.concat_cols(heads) if nh > 1 else heads[0]
        return ad.add(ad.matmul(merged, self._weight(p + "wo")), self.params[p + "bo"])

    @staticmethod
    def deslice(zt: Tensor, m: Tensor) -> Tensor:
        return ad.matmul(m, zt)

    def _layer(self, x: Tensor, layer: int) -> Tensor:
        p = f"layer{layer}."
        normed = ad.layer_norm(x, self.params[p + "ln1_gain"],
                               self.params[p + "ln1_bias"], eps=LN_EPS)
        z, m = self.slice(normed, layer)
        xt = self.deslice(self.attend(z, layer), m)
        x = ad.add(x, xt)
        normed = ad.layer_norm(x, self.params[p + "ln2_gain"],
                               self.params[p + "ln2_bias"], eps=LN_EPS)
        h = ad.gelu(ad.add(ad.matmul(normed, self._weight(p + "wf1")),
                           self.params[p + "bf1"]))
        h = ad.add(ad.matmul(h, self._weight(p + "wf2")), self.params[p + "bf2"])
        return ad.add(x, h)

    def decode(self, x: Tensor) -> Tensor:
        h = ad.gelu(ad.add(ad.matmul(x, self._weight("decoder.w1")),
                           self.params["decoder.b1"]))
        return ad.add(ad.matmul(h, self._weight("decoder.w2")), self.params["decoder.b2"])

    def forward_t(self, k: np.ndarray) -> Tensor:
        """Raw predicted field as a flat (N,) graph tensor; no BCs applied."""
        n = k.size
        x = self.encode(ad.constant(grid_features(k)))
        self._check_finite(x, "encoder")
        for i in range(self.config.layers):
            x = self._layer(x, i)
            self._check_finite(x, f"layer{i}")
        out = self.decode(x)
        self._check_finite(out, "decoder")
        return ad.reshape(out, (n,))

    def forward(self, k: np.ndarray) -> np.ndarray:
        """Raw predicted field on the sample's grid (boundary NOT enforced)."""
        with ad.no_grad():
            return self.forward_t(k).values.reshape(k.shape)

    @staticmethod
    def _check_finite(x: Tensor, where: str):
        if not np.all(np.isfinite(x.values)):
            raise FloatingPointError(f"non-finite activations in {where}")

    # ------------------------------------------------------------------
    # LoRA

    def lora_target_names(self) -> list[str]:
        """Default adapter targets: all per-layer projection matrices."""
        suffixes = ("wu", "wm", "wq", "wk", "wv", "wo", "wf1", "wf2")
        return [f"layer{i}.{s}" for i in range(self.config.layers) for s in suffixes]

    def attach_lora(self, rank: int = 8, alpha: float = 16.0,
                    targets: list[str] | None = None, seed: int = 0) -> None:
        """Attach adapters and freeze the base; only A and B train afterwards.

        A is Gaussian (mean 0, std 0.02) and B starts at zero so the adapted
        model initially matches the base exactly.
        """
        if self.adapters:
            raise ValueError("adapters already attached")
        if rank < 1:
            raise ValueError("rank must be >= 1")
        targets = list(targets) if targets is not None else self.lora_target_names()
        rng = np.random.Generator(np.random.Philox(key=seed & ((1 << 64) - 1)))
        for name in targets:
            if name not in self.params:
                raise ValueError(f"unknown adapter target {name!r}")
            d, m = self.params[name].values.shape
            if rank > min(d, m):
                raise ValueError(f"rank {rank} exceeds min dimension of {name} "
                                 f"({min(d, m)})")
            self.adapters[name] = LoraAdapter(
                a=Tensor(rng.normal(0.0, 0.02, size=(d, rank)),
                         requires_grad=True, name=name + ".lora_a"),
                b=Tensor(np.zeros((rank, m)), requires_grad=True, name=name + ".lora_b"),
                rank=rank, alpha=alpha)
        for p in self.params.values():
            p.requires_grad = False

    def merge_lora(self) -> None:
        """Fold alpha * A @ B into each base matrix, then drop the adapters."""
        for name, adp in self.adapters.items():
            self.params[name].values += adp.alpha * (adp.a.values @ adp.b.values)
        self.detach_lora()

    def detach_lora(self) -> None:
        self.adapters = {}
        for p in self.params.values():
            p.requires_grad = True

    # ------------------------------------------------------------------
    # persistence

    def save(self, path) -> None:
        header = {
            "kind": CHECKPOINT_KIND,
            "config": self.config.to_dict(),
            "adapters": {name: {"rank": adp.rank, "alpha": adp.alpha}
                         for name, adp in self.adapters.items()},
        }
        checkpoint.save_with_header(path, header, self.all_arrays())

    @classmethod
    def load(cls, path) -> "Transolver":
        header, arrays = checkpoint.load_with_header(path)
        if header.get("kind") != CHECKPOINT_KIND:
            raise checkpoint.CheckpointError(
                f"not a model checkpoint (kind={header.get('kind')!r})")
        model = cls(TransolverConfig(**header["config"]), seed=0)
        for name, p in model.params.items():
            p.values = np.array(arrays[name], dtype=np.float64)
        manifest = header.get("adapters", {})
        if manifest:
            any_name = next(iter(manifest))
            model.attach_lora(rank=manifest[any_name]["rank"],
                              alpha=manifest[any_name]["alpha"],
                              targets=list(manifest))
            for name, meta in manifest.items():
                adp = model.adapters[name]
                adp.rank = meta["rank"]
                adp.alpha = meta["alpha"]
                adp.a.values = np.array(arrays[name + ".lora_a"], dtype=np.float64)
                adp.b.values = np.array(arrays[name + ".lora_b"], dtype=np.float64)
        return model
