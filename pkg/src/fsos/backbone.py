"""Embedding networks: shared trunk, closed-set head block, one-class branch.

The extractor is a stack of blocks (dense or conv). Its last block is the
"head"; a shape-identical "branch" copy of that block provides the separate
one-class feature space, and an optional dense projection maps main
embeddings into a one-class space without a branch. The trunk (all blocks
before the last) is shared by every embedding path.
"""

from dataclasses import dataclass

import numpy as np

from .autodiff import Tensor, affine, as_tensor, conv3x3_pool, relu, reshape, scale_shift


class SpecError(ValueError):
    pass


@dataclass(frozen=True)
class BackboneSpec:
    """input_kind: "vector" (input_shape (d,)) or "image" ((c, h, w));
    blocks: tuple of ("dense", out_dim) or ("conv", out_channels)."""

    input_kind: str
    input_shape: tuple
    blocks: tuple

    def __post_init__(self):
        object.__setattr__(self, "input_shape", tuple(int(v) for v in self.input_shape))
        object.__setattr__(
            self, "blocks", tuple((str(k), int(d)) for k, d in self.blocks)
        )
        if self.input_kind not in ("vector", "image"):
            raise SpecError(f"unknown input kind {self.input_kind!r}")
        if len(self.blocks) < 2:
            raise SpecError("backbone needs at least 2 blocks (the branch copies the last)")
        want = "dense" if self.input_kind == "vector" else "conv"
        for kind, dim in self.blocks:
            if kind != want:
                raise SpecError(f"{self.input_kind} input requires {want} blocks, got {kind}")
            if dim < 1:
                raise SpecError(f"non-positive block dim {dim}")
        if self.input_kind == "vector":
            if len(self.input_shape) != 1 or self.input_shape[0] < 1:
                raise SpecError(f"vector input_shape must be (d,), got {self.input_shape}")
        else:
            if len(self.input_shape) != 3:
                raise SpecError(f"image input_shape must be (c, h, w), got {self.input_shape}")
            c, h, w = self.input_shape
            if min(c, h, w) < 1:
                raise SpecError(f"non-positive image dims {self.input_shape}")
            for _ in self.blocks:
                if h < 2 or w < 2 or h % 2 or w % 2:
                    raise SpecError("image dims must stay even and >= 2 through every pool")
                h, w = h // 2, w // 2

    @property
    def embed_dim(self):
        if self.input_kind == "vector":
            return self.blocks[-1][1]
        c, h, w = self.input_shape
        for _, oc in self.blocks:
            c, h, w = oc, h // 2, w // 2
        return c * h * w

    def to_dict(self):
        return {
            "input_kind": self.input_kind,
            "input_shape": list(self.input_shape),
            "blocks": [[k, d] for k, d in self.blocks],
        }

    @staticmethod
    def from_dict(d):
        return BackboneSpec(d["input_kind"], tuple(d["input_shape"]), tuple(
            (k, v) for k, v in d["blocks"]
        ))


DEFAULT_VECTOR_SPEC = BackboneSpec("vector", (32,), (("dense", 64), ("dense", 64)))
DEFAULT_IMAGE_SPEC = BackboneSpec("image", (1, 16, 16), (("conv", 32), ("conv", 32)))


class BackboneParams:
    """Parameter groups: trunk blocks, head block, branch block (same shapes
    as head), optional projection (W, b) of the main embedding."""

    def __init__(self, spec, trunk, head, branch, projection=None):
        self.spec = spec
        self.trunk = trunk
        self.head = head
        self.branch = branch
        self.projection = projection

    @property
    def embed_dim(self):
        return self.spec.embed_dim

    def copy(self):
        return BackboneParams(
            self.spec,
            [_copy_block(b) for b in self.trunk],
            _copy_block(self.head),
            _copy_block(self.branch),
            None if self.projection is None else _copy_block(self.projection),
        )

    def named_groups(self):
        """Flat (group_name, [(param_name, Tensor), ...]) pairs, fixed order."""
        groups = []
        for i, block in enumerate(self.trunk):
            groups.append((f"trunk{i}", sorted(block.items())))
        groups.append(("head", sorted(self.head.items())))
        groups.append(("branch", sorted(self.branch.items())))
        if self.projection is not None:
            groups.append(("projection", sorted(self.projection.items())))
        return groups

    def trunk_tensors(self):
        return [t for block in self.trunk for _, t in sorted(block.items())]

    def head_tensors(self):
        return [t for _, t in sorted(self.head.items())]

    def branch_tensors(self):
        return [t for _, t in sorted(self.branch.items())]

    def projection_tensors(self):
        if self.projection is None:
            raise SpecError("projection parameters are not initialized")
        return [t for _, t in sorted(self.projection.items())]


def _copy_block(block):
    return {k: Tensor(v.data.copy(), requires_grad=v.requires_grad) for k, v in block.items()}


def _init_dense(rng, in_dim, out_dim):
    bound = 1.0 / np.sqrt(in_dim)
    return {
        "W": Tensor(rng.uniform(-bound, bound, (in_dim, out_dim)), requires_grad=True),
        "b": Tensor(rng.uniform(-bound, bound, (out_dim,)), requires_grad=True),
    }


def _init_conv(rng, in_c, out_c):
    bound = 1.0 / np.sqrt(in_c * 9)
    return {
        "K": Tensor(rng.uniform(-bound, bound, (out_c, in_c, 3, 3)), requires_grad=True),
        "b": Tensor(rng.uniform(-bound, bound, (out_c,)), requires_grad=True),
        # scale/shift start as the identity map, like a freshly initialized norm layer
        "gamma": Tensor(np.ones(out_c), requires_grad=True),
        "beta": Tensor(np.zeros(out_c), requires_grad=True),
    }


def init_backbone(spec, seed, with_projection=False):
    """Deterministic parameters; the branch starts as a bit-identical copy of
    the head block, and the optional projection starts as the identity map."""
    rng = np.random.default_rng(seed)
    blocks = []
    if spec.input_kind == "vector":
        dims = [spec.input_shape[0]] + [d for _, d in spec.blocks]
        for i in range(len(spec.blocks)):
            blocks.append(_init_dense(rng, dims[i], dims[i + 1]))
    else:
        chans = [spec.input_shape[0]] + [d for _, d in spec.blocks]
        for i in range(len(spec.blocks)):
            blocks.append(_init_conv(rng, chans[i], chans[i + 1]))
    head = blocks[-1]
    params = BackboneParams(spec, blocks[:-1], head, _copy_block(head))
    if with_projection:
        add_projection(params)
    return params


def add_projection(params):
    """Attach an identity-initialized dense projection of the main embedding."""
    e = params.embed_dim
    params.projection = {
        "W": Tensor(np.eye(e), requires_grad=True),
        "b": Tensor(np.zeros(e), requires_grad=True),
    }
    return params


def _coerce_input(spec, x):
    x = as_tensor(x)
    d = x.data
    if spec.input_kind == "vector":
        if d.shape[-1:] != spec.input_shape or d.ndim not in (1, 2):
            raise SpecError(f"input shape {d.shape} does not match spec {spec.input_shape}")
        return x, d.ndim == 1
    if d.shape == spec.input_shape:
        return x, True
    if d.ndim == 4 and d.shape[1:] == spec.input_shape:
        return x, False
    # flat rows are accepted for image specs (datasets store flat vectors)
    flat = int(np.prod(spec.input_shape))
    if d.shape[-1:] == (flat,) and d.ndim in (1, 2):
        single = d.ndim == 1
        shaped = d.reshape(spec.input_shape if single else (-1,) + spec.input_shape)
        return Tensor(shaped, requires_grad=x.requires_grad), single
    raise SpecError(f"input shape {d.shape} does not match spec {spec.input_shape}")


def _run_block(kind, block, h):
    if kind == "dense":
        return relu(affine(h, block["W"], block["b"]))
    pooled = conv3x3_pool(h, block["K"], block["b"])
    return scale_shift(pooled, block["gamma"], block["beta"])


def _forward(params, x, last_block):
    spec = params.spec
    h, single = _coerce_input(spec, x)
    for (kind, _), block in zip(spec.blocks[:-1], params.trunk):
        h = _run_block(kind, block, h)
    h = _run_block(spec.blocks[-1][0], last_block, h)
    if spec.input_kind == "image":
        h = reshape(h, (params.embed_dim,) if single else (-1, params.embed_dim))
    return h


def to_param_groups(params):
    """Checkpoint groups: [(group_name, [(param_name, ndarray), ...]), ...]."""
    return [
        (gname, [(pname, t.data) for pname, t in items])
        for gname, items in params.named_groups()
    ]


def from_param_groups(spec, groups):
    """Rebuild BackboneParams from checkpoint groups (inverse of
    to_param_groups)."""
    by_name = {g: dict(items) for g, items in groups}
    n_trunk = len(spec.blocks) - 1
    def block(name):
        if name not in by_name:
            raise SpecError(f"checkpoint is missing parameter group {name!r}")
        return {
            p: Tensor(np.array(a, dtype=np.float64), requires_grad=True)
            for p, a in by_name[name].items()
        }
    trunk = [block(f"trunk{i}") for i in range(n_trunk)]
    params = BackboneParams(spec, trunk, block("head"), block("branch"))
    if "projection" in by_name:
        params.projection = block("projection")
    return params


def embed(params, x):
    """Main embedding f(x): trunk then head block, flattened to embed_dim."""
    return _forward(params, x, params.head)


def embed_branch(params, x):
    """One-class branch embedding: shared trunk, branch copy of the last block."""
    return _forward(params, x, params.branch)


def embed_projected(params, x):
    """Projected one-class embedding: dense map applied to the main embedding."""
    if params.projection is None:
        raise SpecError("projection parameters are not initialized")
    return affine(embed(params, x), params.projection["W"], params.projection["b"])
