"""Three-stage feature-extraction network with set pooling and gated fusion.

Pipeline per forward pass: each image (RGB plus its light direction
broadcast to 6 input channels) runs through the shallow extractor; the
per-image feature maps are max-pooled across the set and regressed to a
normal map. A fusion step blends each per-image map with the pooled map
through a per-position sigmoid gate (or plain concatenation when gating
is disabled) and feeds the result to the next stage. Three stages deep,
three predictions out; the deep prediction is the final answer.

All extractors share their weights across set elements, so predictions
are invariant to the order of the input images.
"""

from __future__ import annotations

import json
from dataclasses import asdict, dataclass, field

import numpy as np

from . import autodiff as ad
from .autodiff import BatchNormState, ParamGroup, Tensor
from .dataio import ImageSet, NormalMap
from .errors import DataError
from .preprocess import normalize_observations

STAGES = ("shallow", "middle", "deep")
CHECKPOINT_VERSION = 1


@dataclass
class MsfConfig:
    base_channels: int = 16
    extractor_depth: int = 3
    kernel_size: int = 3
    normalize_input: bool = True
    gated_fusion: bool = True  # False: plain concat connection between stages
    share_fusion: bool = False  # one fusion parameter set for both sites
    per_stage_heads: bool = False  # separate regression head per stage
    leaky_slope: float = 0.1
    bn_eps: float = 1e-5
    bn_momentum: float = 0.1
    seed: int = 0

    def __post_init__(self):
        if self.base_channels < 1:
            raise ValueError("base_channels must be >= 1")
        if self.extractor_depth < 1:
            raise ValueError("extractor_depth must be >= 1")
        if self.kernel_size % 2 != 1:
            raise ValueError("kernel_size must be odd")


@dataclass
class StageOutputs:
    """What one stage produces: per-image features, pooled map, prediction."""

    stage: str
    features: Tensor  # [n,C,H,W]
    pooled: Tensor  # [C,H,W]
    prediction: NormalMap  # carries the autodiff tensor
    fused: Tensor | None  # [n,2C,H,W]; None at the deep stage


class ConvLayer:
    def __init__(self, rng, c_in: int, c_out: int, k: int, bias: bool = True):
        fan_in = c_in * k * k
        std = np.sqrt(2.0 / fan_in)
        self.weight = Tensor(rng.normal(0.0, std, size=(c_out, c_in, k, k)), requires_grad=True)
        self.bias = Tensor(np.zeros(c_out), requires_grad=True) if bias else None
        self.padding = (k - 1) // 2

    def __call__(self, x: Tensor) -> Tensor:
        return ad.conv2d(x, self.weight, self.bias, padding=self.padding)

    @property
    def tensors(self):
        return [self.weight] if self.bias is None else [self.weight, self.bias]


class FusionBlock:
    """Gate each per-image map against the pooled map (one shared transform)."""

    def __init__(self, rng, channels: int, eps: float, momentum: float):
        # no conv bias: batch norm would cancel a constant shift anyway
        self.conv = ConvLayer(rng, channels, channels, 1, bias=False)
        self.gamma = Tensor(np.ones(channels), requires_grad=True)
        self.beta = Tensor(np.zeros(channels), requires_grad=True)
        self.state = BatchNormState.create(channels, momentum)
        self.eps = eps

    @property
    def tensors(self):
        return self.conv.tensors + [self.gamma, self.beta]

    def _transform(self, x: Tensor, mode: str, update_stats: bool) -> Tensor:
        return ad.batch_norm(
            self.conv(ad.gelu(x)),
            self.gamma,
            self.beta,
            self.state,
            mode=mode,
            eps=self.eps,
            update_running=update_stats,
        )

    def __call__(
        self,
        features: Tensor,
        pooled: Tensor,
        mode: str = "train",
        update_stats: bool | None = None,
        gate_override: float | None = None,
    ) -> Tensor:
        if update_stats is None:
            update_stats = mode == "train"
        n = features.shape[0]
        tf = self._transform(features, mode, update_stats)
        tp = self._transform(pooled, mode, update_stats)
        if gate_override is None:
            gate = ad.sigmoid(ad.sum_channels(ad.mul(tf, ad.expand_set(tp, n))))
        else:
            gate = Tensor(np.full((n,) + features.shape[2:], float(gate_override)))
        pooled_rep = ad.expand_set(pooled, n)
        if n == 1:
            # pooled == the single map, so the blend is the identity for any gate
            blend = features
        else:
            blend = ad.add(
                ad.scale_by_gate(features, 1.0 - gate),
                ad.scale_by_gate(pooled_rep, gate),
            )
        return ad.concat_channels(blend, features)


def concat_connection(features: Tensor, pooled: Tensor) -> Tensor:
    """Parameter-free inter-stage link: concat the pooled map onto each image."""
    n = features.shape[0]
    return ad.concat_channels(ad.expand_set(pooled, n), features)


class RegressionHead:
    """Two k x k convs then a 1x1 projection to 3 channels, unit-normalized."""

    def __init__(self, rng, channels: int, k: int, slope: float):
        self.convs = [
            ConvLayer(rng, channels, channels, k),
            ConvLayer(rng, channels, channels, k),
            ConvLayer(rng, channels, 3, 1),
        ]
        self.slope = slope

    @property
    def tensors(self):
        return [t for conv in self.convs for t in conv.tensors]

    def __call__(self, pooled: Tensor, mask: np.ndarray) -> NormalMap:
        x = ad.leaky_relu(self.convs[0](pooled), self.slope)
        x = ad.leaky_relu(self.convs[1](x), self.slope)
        x = self.convs[2](x)
        unit, degenerate = ad.normalize_channels(x)
        arr = unit.detach()
        arr[:, ~mask] = 0.0
        return NormalMap(normals=arr, mask=mask.copy(), degenerate=degenerate, tensor=unit)


class MsfNet:
    """The full three-stage network: extractors, fusion sites, regression."""

    def __init__(self, config: MsfConfig):
        self.config = config
        rng = np.random.default_rng(config.seed)
        c, k, depth = config.base_channels, config.kernel_size, config.extractor_depth

        self.extractors = {}
        for stage in STAGES:
            c_in = 6 if stage == "shallow" else 2 * c
            layers = []
            for i in range(depth):
                layers.append(ConvLayer(rng, c_in if i == 0 else c, c, k))
            self.extractors[stage] = layers

        self.fusions = {}
        if config.gated_fusion:
            block1 = FusionBlock(rng, c, config.bn_eps, config.bn_momentum)
            self.fusions["fusion1"] = block1
            self.fusions["fusion2"] = (
                block1 if config.share_fusion else FusionBlock(rng, c, config.bn_eps, config.bn_momentum)
            )

        self.heads = {}
        if config.per_stage_heads:
            for stage in STAGES:
                self.heads[stage] = RegressionHead(rng, c, k, config.leaky_slope)
        else:
            shared = RegressionHead(rng, c, k, config.leaky_slope)
            for stage in STAGES:
                self.heads[stage] = shared

        self.groups = self._build_groups()

    def _build_groups(self):
        groups = {}
        for stage in STAGES:
            tensors = [t for layer in self.extractors[stage] for t in layer.tensors]
            groups[f"{stage}_extractor"] = ParamGroup(f"{stage}_extractor", tensors)
        if self.config.gated_fusion:
            groups["fusion1"] = ParamGroup("fusion1", list(self.fusions["fusion1"].tensors))
            if not self.config.share_fusion:
                groups["fusion2"] = ParamGroup("fusion2", list(self.fusions["fusion2"].tensors))
        if self.config.per_stage_heads:
            for stage in STAGES:
                groups[f"regression_{stage}"] = ParamGroup(
                    f"regression_{stage}", list(self.heads[stage].tensors)
                )
        else:
            groups["regression"] = ParamGroup("regression", list(self.heads["shallow"].tensors))
        return groups

    # -- stage pieces ------------------------------------------------------

    def _extract(self, stacked: Tensor, stage: str) -> Tensor:
        x = stacked
        for layer in self.extractors[stage]:
            x = ad.leaky_relu(layer(x), self.config.leaky_slope)
        return x

    def extract_stage(self, stage: str, inputs) -> list:
        """Shared-weight extraction over a list of [C,H,W] tensors."""
        inputs = list(inputs)
        if not inputs:
            raise ValueError("extract_stage: empty input list")
        out = self._extract(ad.stack_set(inputs), stage)
        return [ad.index_set(out, i) for i in range(len(inputs))]

    def _connect(
        self, site: str, features: Tensor, pooled: Tensor, mode, update_stats, gate_override
    ) -> Tensor:
        if self.config.gated_fusion:
            return self.fusions[site](
                features, pooled, mode=mode, update_stats=update_stats, gate_override=gate_override
            )
        return concat_connection(features, pooled)

    def fuse(self, site: str, features, mode: str = "train", gate_override=None) -> list:
        """Fusion over a list of [C,H,W] tensors; returns a list of [2C,H,W]."""
        features = list(features)
        if not features:
            raise ValueError("fuse: empty feature list")
        stacked = ad.stack_set(features)
        pooled = ad.max_over_set(stacked)
        out = self._connect(site, stacked, pooled, mode, mode == "train", gate_override)
        return [ad.index_set(out, i) for i in range(len(features))]

    def regress_normals(self, pooled: Tensor, stage: str, mask: np.ndarray) -> NormalMap:
        return self.heads[stage](pooled, mask)

    # -- full forward ------------------------------------------------------

    def encode_inputs(self, imageset: ImageSet) -> Tensor:
        """Stack per-image [RGB | broadcast light direction] planes: [n,6,H,W]."""
        data = normalize_observations(imageset) if self.config.normalize_input else imageset
        h, w = imageset.height, imageset.width
        planes = []
        for img, light in zip(data.images, data.lights):
            ldir = np.broadcast_to(light.direction[:, None, None], (3, h, w))
            planes.append(np.concatenate([img, ldir]))
        return Tensor(np.stack(planes))

    def forward(
        self,
        imageset: ImageSet,
        mode: str = "train",
        update_stats: bool | None = None,
        gate_override: float | None = None,
    ) -> dict:
        """Run all three stages; returns {stage: StageOutputs}."""
        if update_stats is None:
            update_stats = mode == "train"
        x = self.encode_inputs(imageset)
        mask = imageset.mask
        outputs = {}
        for si, stage in enumerate(STAGES):
            feats = self._extract(x, stage)
            pooled = ad.max_over_set(feats)
            pred = self.regress_normals(pooled, stage, mask)
            fused = None
            if stage != "deep":
                site = "fusion1" if stage == "shallow" else "fusion2"
                fused = self._connect(site, feats, pooled, mode, update_stats, gate_override)
                x = fused
            outputs[stage] = StageOutputs(
                stage=stage, features=feats, pooled=pooled, prediction=pred, fused=fused
            )
        return outputs

    def predict(self, imageset: ImageSet) -> NormalMap:
        """Eval-mode forward; returns the deep-stage prediction only."""
        return self.forward(imageset, mode="eval")["deep"].prediction

    # -- bookkeeping -------------------------------------------------------

    def all_tensors(self):
        seen, out = set(), []
        for group in self.groups.values():
            for t in group.tensors:
                if id(t) not in seen:
                    seen.add(id(t))
                    out.append(t)
        return out

    def n_params(self) -> int:
        return sum(t.size for t in self.all_tensors())

    def bn_states(self):
        states = {}
        if self.config.gated_fusion:
            states["fusion1"] = self.fusions["fusion1"].state
            if not self.config.share_fusion:
                states["fusion2"] = self.fusions["fusion2"].state
        return states

    def state_arrays(self):
        """Flat name -> array view of every parameter and BN buffer."""
        arrays = {}
        for name, group in self.groups.items():
            for i, t in enumerate(group.tensors):
                arrays[f"param/{name}/{i}"] = t.data
        for name, state in self.bn_states().items():
            arrays[f"bn/{name}/mean"] = state.mean
            arrays[f"bn/{name}/var"] = state.var
        return arrays

    def snapshot(self) -> dict:
        return {k: v.copy() for k, v in self.state_arrays().items()}

    def load_snapshot(self, snap: dict):
        for name, group in self.groups.items():
            for i, t in enumerate(group.tensors):
                key = f"param/{name}/{i}"
                if key not in snap:
                    raise DataError(f"snapshot missing {key}")
                if snap[key].shape != t.data.shape:
                    raise DataError(f"snapshot {key}: shape {snap[key].shape} != {t.data.shape}")
                t.data = snap[key].copy()
        for name, state in self.bn_states().items():
            state.mean = snap[f"bn/{name}/mean"].copy()
            state.var = snap[f"bn/{name}/var"].copy()


# ---------------------------------------------------------------------------
# checkpoints


def save_checkpoint(net: MsfNet, path: str):
    """Versioned npz container; float64 arrays round-trip bitwise."""
    meta = {
        "version": CHECKPOINT_VERSION,
        "config": asdict(net.config),
        "frozen": {name: group.frozen for name, group in net.groups.items()},
    }
    arrays = {k.replace("/", "__"): v for k, v in net.state_arrays().items()}
    np.savez(path, __meta__=np.array(json.dumps(meta)), **arrays)


def load_checkpoint(path: str) -> MsfNet:
    try:
        with np.load(path, allow_pickle=False) as zf:
            if "__meta__" not in zf:
                raise DataError(f"{path}: not a checkpoint (missing metadata)")
            meta = json.loads(str(zf["__meta__"]))
            arrays = {k: zf[k].copy() for k in zf.files if k != "__meta__"}
    except (OSError, ValueError) as exc:
        raise DataError(f"cannot read checkpoint {path}: {exc}") from exc
    if meta.get("version") != CHECKPOINT_VERSION:
        raise DataError(f"{path}: unsupported checkpoint version {meta.get('version')}")
    net = MsfNet(MsfConfig(**meta["config"]))
    snap = {k.replace("__", "/"): v for k, v in arrays.items()}
    net.load_snapshot(snap)
    for name, frozen in meta.get("frozen", {}).items():
        if name in net.groups:
            net.groups[name].frozen = bool(frozen)
    return net
