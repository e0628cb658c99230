"""Semantically decomposed scene representation.

One geometry head per semantic class shares the hash grid; a single coarse
head is distilled from them for tracking. Colour and semantic heads are
conditioned on image features pooled from reference views.
"""
from __future__ import annotations

from dataclasses import asdict, dataclass, field as dc_field

import numpy as np
import torch
from torch import nn

from .diffnet import ConvEncoder, Mlp, load_checkpoint, sample_feature, save_checkpoint, tensor_digest
from .encoding import HashGrid, OneBlobConfig, oneblob_encode
from .geometry import Intrinsics, Pose

__all__ = ["FieldConfig", "RefView", "PooledFeature", "SceneField", "UnknownClassError"]


class UnknownClassError(KeyError):
    pass


@dataclass
class FieldConfig:
    bounds: list = dc_field(default_factory=lambda: [[-1.6, -1.6, -0.1], [1.6, 1.6, 3.1]])
    levels: int = 16
    base_resolution: int = 16
    finest_voxel: float = 0.02  # metres; sets max_resolution
    features_per_level: int = 2
    table_size: int = 2**15
    bins: int = 16
    latent_dim: int = 16
    hidden: int = 32
    image_channels: int = 16
    ref_dim: int = 16
    seed: int = 0

    @classmethod
    def toy(cls, **kw) -> "FieldConfig":
        """Coarser grid sized for minutes-scale CPU runs on the synthetic room."""
        base = dict(levels=8, base_resolution=8, finest_voxel=0.02, table_size=2**14, latent_dim=4)
        return cls(**{**base, **kw})

    @property
    def max_resolution(self) -> int:
        lo, hi = np.asarray(self.bounds, dtype=float)
        return max(self.base_resolution, int(np.ceil((hi - lo).max() / self.finest_voxel)))


@dataclass
class RefView:
    """A reference frame's cached feature map and its camera."""

    features: torch.Tensor  # (h, w, F)
    pose: Pose
    K: Intrinsics


@dataclass
class PooledFeature:
    vector: torch.Tensor  # (N, ref_dim)
    contributing_refs: torch.Tensor  # (N,) counts


class _SemanticHead(nn.Module):
    """Two hidden layers plus one output row per class, so classes can be added."""

    def __init__(self, in_dim: int, hidden: int, seed: int, dtype):
        super().__init__()
        self.trunk = Mlp(in_dim, hidden, hidden=hidden, n_hidden=1, seed=seed, dtype=dtype)
        self.rows = nn.ParameterDict()
        self.bias = nn.ParameterDict()
        self.hidden = hidden
        self.dtype = dtype

    def add_row(self, key: str) -> None:
        self.rows[key] = nn.Parameter(torch.zeros(self.hidden, dtype=self.dtype))
        self.bias[key] = nn.Parameter(torch.zeros((), dtype=self.dtype))

    def forward(self, x: torch.Tensor, keys: list) -> torch.Tensor:
        hid = torch.relu(self.trunk(x))
        W = torch.stack([self.rows[k] for k in keys])
        b = torch.stack([self.bias[k] for k in keys])
        return hid @ W.T + b


class SceneField(nn.Module):
    def __init__(self, cfg: FieldConfig | None = None, dtype=torch.float64):
        super().__init__()
        cfg = cfg or FieldConfig()
        self.cfg = cfg
        self.dtype = dtype
        lo, hi = np.asarray(cfg.bounds, dtype=float)
        self.register_buffer("lo", torch.as_tensor(lo, dtype=dtype))
        self.register_buffer("extent", torch.as_tensor(hi - lo, dtype=dtype))
        self.oneblob = OneBlobConfig(cfg.bins)
        self.grid = HashGrid(
            cfg.levels, cfg.base_resolution, cfg.max_resolution, cfg.features_per_level,
            cfg.table_size, seed=cfg.seed, dtype=dtype,
        )
        ob = self.oneblob.out_dim
        self.geo_in = ob + self.grid.out_dim
        self.app_in = ob + cfg.latent_dim + cfg.ref_dim
        self.geometry_heads = nn.ModuleDict()
        self.coarse_head = self._geometry_mlp(seed=cfg.seed * 7919 + 1)
        self.color_head = Mlp(self.app_in, 3, cfg.hidden, seed=cfg.seed * 7919 + 2, dtype=dtype)
        self.semantic_head = _SemanticHead(self.app_in, cfg.hidden, cfg.seed * 7919 + 3, dtype)
        self.ref_encoder = Mlp(2 * ob + cfg.image_channels, cfg.ref_dim, cfg.hidden,
                               seed=cfg.seed * 7919 + 4, dtype=dtype)
        self.image_encoder = ConvEncoder(cfg.image_channels, seed=cfg.seed * 7919 + 5, dtype=dtype)
        self.class_ids: list[int] = []
        self.warming: set[int] = set()

    def _geometry_mlp(self, seed: int) -> Mlp:
        return Mlp(self.geo_in, self.cfg.latent_dim, self.cfg.hidden, seed=seed, out_scale=0.1, dtype=self.dtype)

    # -- classes -------------------------------------------------------------

    def add_class(self, class_id: int) -> None:
        class_id = int(class_id)
        if class_id in self.class_ids:
            raise ValueError(f"class {class_id} already has a geometry head")
        self.geometry_heads[str(class_id)] = self._geometry_mlp(seed=self.cfg.seed * 7919 + 100 + class_id)
        self.semantic_head.add_row(str(class_id))
        self.class_ids.append(class_id)
        self.warming.add(class_id)

    def class_index(self, class_ids) -> torch.Tensor:
        """Logit positions of class ids."""
        lookup = {c: i for i, c in enumerate(self.class_ids)}
        try:
            return torch.as_tensor([lookup[int(c)] for c in np.asarray(class_ids).ravel()], dtype=torch.long)
        except KeyError as exc:
            raise UnknownClassError(f"class {exc.args[0]} has no head; call add_class first") from None

    def head_parameters(self, class_id: int) -> list:
        return list(self.geometry_heads[str(class_id)].parameters())

    def shared_parameters(self) -> list:
        """Everything trainable except the geometry heads and the coarse head."""
        return [self.grid.tables, *self.color_head.parameters(), *self.semantic_head.parameters(),
                *self.ref_encoder.parameters()]

    # -- encodings -----------------------------------------------------------

    def normalize(self, x: torch.Tensor) -> torch.Tensor:
        return (x - self.lo) / self.extent

    def position_encoding(self, x: torch.Tensor) -> torch.Tensor:
        return oneblob_encode(self.normalize(x), self.oneblob)

    def geometry_input(self, x: torch.Tensor, pos_enc: torch.Tensor | None = None) -> torch.Tensor:
        xn = self.normalize(x)
        if pos_enc is None:
            pos_enc = oneblob_encode(xn, self.oneblob)
        return torch.cat([pos_enc, self.grid(xn.clamp(0, 1))], -1)

    @staticmethod
    def _split(raw: torch.Tensor):
        # channel 0 of the latent is the occupancy logit
        return raw, torch.sigmoid(raw[..., 0])

    # -- heads ---------------------------------------------------------------

    def eval_geometry(self, class_id: int, x: torch.Tensor, geo_in: torch.Tensor | None = None):
        """Latent ``h`` and occupancy in [0, 1] from the head of ``class_id``."""
        key = str(int(class_id))
        if key not in self.geometry_heads:
            raise UnknownClassError(f"class {class_id} has no head; call add_class first")
        if geo_in is None:
            geo_in = self.geometry_input(x)
        return self._split(self.geometry_heads[key](geo_in))

    def eval_coarse(self, x: torch.Tensor, geo_in: torch.Tensor | None = None):
        if geo_in is None:
            geo_in = self.geometry_input(x)
        return self._split(self.coarse_head(geo_in))

    def gather_reference_features(self, x: torch.Tensor, refs: list) -> PooledFeature:
        """Mean of the encoded image features of every reference view that sees ``x``."""
        n = x.shape[0]
        total = torch.zeros(n, self.cfg.ref_dim, dtype=x.dtype)
        count = torch.zeros(n, dtype=x.dtype)
        for ref in refs:
            R = ref.pose.rotation().detach().to(x.dtype)
            o = ref.pose.trans.detach().to(x.dtype)
            pc = (x - o) @ R
            z = pc[:, 2]
            front = z > 1e-6
            zs = torch.where(front, z, torch.ones_like(z))
            K = ref.K
            uv = torch.stack([K.fx * pc[:, 0] / zs + K.cx, K.fy * pc[:, 1] / zs + K.cy], -1)
            feat, valid = sample_feature(ref.features, uv, ConvEncoder.stride, (K.width, K.height))
            seen = (front & valid).to(x.dtype)
            if not bool(seen.any()):
                continue
            view = x - o
            view = view / torch.linalg.norm(view, dim=-1, keepdim=True).clamp(min=1e-9)
            enc_o = oneblob_encode(self.normalize(o).clamp(0, 1), self.oneblob).expand(n, -1)
            enc_d = oneblob_encode((view + 1) / 2, self.oneblob)
            enc = self.ref_encoder(torch.cat([enc_o, enc_d, feat], -1))
            total = total + enc * seen[:, None]
            count = count + seen
        pooled = total / count.clamp(min=1)[:, None]
        return PooledFeature(pooled, count)

    def _app_input(self, x, h, pooled, pos_enc):
        if pos_enc is None:
            pos_enc = self.position_encoding(x)
        vec = pooled.vector if isinstance(pooled, PooledFeature) else pooled
        return torch.cat([pos_enc, h, vec], -1)

    def eval_color(self, x, h, pooled, pos_enc=None) -> torch.Tensor:
        return torch.sigmoid(self.color_head(self._app_input(x, h, pooled, pos_enc)))

    def eval_semantic(self, x, h, pooled, pos_enc=None) -> torch.Tensor:
        keys = [str(c) for c in self.class_ids]
        return self.semantic_head(self._app_input(x, h, pooled, pos_enc), keys)

    def feature_map(self, rgb) -> torch.Tensor:
        return self.image_encoder(rgb)

    # -- persistence ---------------------------------------------------------

    def named_tensors(self) -> dict:
        return {k: v.detach() for k, v in self.state_dict().items()}

    def digest(self) -> str:
        return tensor_digest(self.named_tensors())

    def save(self, path, extra_meta: dict | None = None) -> None:
        meta = {
            "field_config": asdict(self.cfg),
            "class_ids": self.class_ids,
            "heads": {str(c): f"geometry_heads.{c}" for c in self.class_ids},
            "warming": sorted(self.warming),
        }
        meta.update(extra_meta or {})
        save_checkpoint(path, self.named_tensors(), meta)

    @classmethod
    def load(cls, path) -> tuple["SceneField", dict]:
        tensors, meta = load_checkpoint(path)
        f = cls(FieldConfig(**meta["field_config"]))
        for c in meta["class_ids"]:
            f.add_class(c)
        f.warming = set(meta.get("warming", []))
        f.load_state_dict(tensors)
        return f, meta
