"""Multi-scale residue-type prediction network.

Node states are (scalar, vector) pairs. Geometric vector perceptrons mix
vector channels linearly (rotation-equivariant), feed channel norms into
the scalar track (rotation-invariant), and gate output vectors with
sigmoid scalars. Two independent GVP stacks run message passing over the
residue radius graph and the surface kNN graph; surface states are
initialized from nearby residue features plus geometric surface features,
and are folded back into residue states as the mean over each residue's
nearest surface points. A linear head on final scalars yields 20-way
residue-type log probabilities.

Residue embeddings come either from S3FE files (frozen upstream model)
or from a small trainable embedder: a 21-row type table (row 20 is the
mask token) averaged over a +-2 sequence window.
"""

from __future__ import annotations

import json
import struct
from dataclasses import asdict, dataclass, field

import numpy as np

from . import autodiff as ad
from .autodiff import Parameter, Tensor
from .errors import DataError
from .geometry import RbfConfig, SpatialGraph, build_knn_graph, build_radius_graph, cross_knn
from .io import N_RESIDUE_TYPES, Protein, ResidueEmbeddings, mask_context_tag
from .surface import SurfacePointCloud

CHECKPOINT_MAGIC = b"S3FC"
CHECKPOINT_VERSION = 1

MODES = ("s2f", "s3f", "surf_only")
MASK_TOKEN = N_RESIDUE_TYPES  # row index of the mask token in the toy table


@dataclass
class GvpState:
    scalar: Tensor   # (n, d)
    vector: Tensor   # (n, d', 3)


@dataclass
class GvpParams:
    w_h: Parameter    # (d_h, v_in) vector channel mixing
    w_mu: Parameter   # (v_out, d_h)
    w_m: Parameter    # (s_in + d_h, s_out) scalar map
    b_m: Parameter    # (s_out,)
    w_g: Parameter    # (s_out, v_out) vector gate
    b_g: Parameter    # (v_out,)
    hidden: bool = True   # ReLU on scalars; output layers use identity


@dataclass
class GvpBlock:
    message: GvpParams
    feedforward: GvpParams


@dataclass
class Corruption:
    """How the input sequence was manipulated before embedding."""

    corrupted_sequence: np.ndarray
    mask_positions: np.ndarray
    random_positions: np.ndarray = field(
        default_factory=lambda: np.empty(0, dtype=np.int64))


@dataclass(frozen=True)
class ModelConfig:
    mode: str = "s3f"
    embedder: str = "toy"          # toy | file
    embed_dim: int = 64
    scalar_dim: int = 100
    vector_dim: int = 16
    structure_layers: int = 5
    surface_layers: int = 5
    init_hidden: int = 128
    surface_feat_dim: int = 5
    radius_cutoff: float = 10.0
    surface_knn: int = 16
    init_neighbors: int = 3
    fuse_neighbors: int = 20
    rbf_kernels: int = 16
    rbf_max: float = 20.0
    window_halfwidth: int = 2
    normalize: bool = True
    fuse_scalar_only: bool = False
    head_init: float = 1e-3
    seed: int = 0

    def __post_init__(self):
        if self.mode not in MODES:
            raise DataError(f"unknown mode {self.mode!r}")
        if self.embedder not in ("toy", "file"):
            raise DataError(f"unknown embedder {self.embedder!r}")

    @property
    def rbf(self) -> RbfConfig:
        return RbfConfig(n_kernels=self.rbf_kernels, min_d=0.0, max_d=self.rbf_max)

    def to_json(self) -> str:
        return json.dumps(asdict(self), sort_keys=True)

    @classmethod
    def from_json(cls, blob: str) -> "ModelConfig":
        return cls(**json.loads(blob))


# ---------------------------------------------------------------------------
# layers
# ---------------------------------------------------------------------------

def gvp_apply(p: GvpParams, scalar, vector):
    """One geometric vector perceptron on a batch of (scalar, vector) rows.

    Scalar and vector inputs may each be a list of tensors, treated as a
    feature-axis concatenation (node state plus edge features, say).
    """
    scalars = scalar if isinstance(scalar, list) else [scalar]
    vectors = vector if isinstance(vector, list) else [vector]
    v_h = ad.channel_mix_split(p.w_h, vectors)
    norms = ad.vec_norm(v_h)
    lin = ad.linear_split(scalars + [norms], p.w_m, p.b_m)
    s_out = ad.relu(lin) if p.hidden else lin
    v_mu = ad.channel_mix(p.w_mu, v_h)
    gate = ad.sigmoid(ad.linear_split([s_out], p.w_g, p.b_g))
    v_out = v_mu * ad.reshape(gate, gate.shape + (1,))
    return s_out, v_out


def _layer_norm_scalar(s: Tensor) -> Tensor:
    mu = ad.tmean(s, axis=1, keepdims=True)
    centered = s - mu
    var = ad.tmean(centered * centered, axis=1, keepdims=True)
    return centered / ad.sqrt(var + 1e-8)


def _rescale_vector(v: Tensor) -> Tensor:
    n_channels = v.shape[1]
    fro2 = ad.tsum(v * v, axis=(1, 2), keepdims=True)
    return v * (np.sqrt(n_channels) / ad.sqrt(fro2 + 1e-8))


def run_message_passing(blocks, graph: SpatialGraph, state: GvpState,
                        normalize: bool = True) -> GvpState:
    """Residual message passing: per block, add the mean GVP message over
    in-neighbors (edge features concatenated onto the neighbor state), then
    add a feedforward GVP of the node state. Nodes without neighbors
    receive a zero message."""
    scalar, vector = state.scalar, state.vector
    n = graph.n_nodes
    has_edges = graph.n_edges > 0
    if has_edges:
        edge_s = Tensor(graph.edge_scalar)
        edge_v = Tensor(graph.edge_vec[:, None, :])
        inv_deg = 1.0 / np.maximum(graph.in_degree(), 1)
    for block in blocks:
        if has_edges:
            msg_s_in = [ad.gather(scalar, graph.src), edge_s]
            msg_v_in = [ad.gather(vector, graph.src), edge_v]
            msg_s, msg_v = gvp_apply(block.message, msg_s_in, msg_v_in)
            scalar = scalar + ad.segment_sum(msg_s, graph.dst, n) * inv_deg[:, None]
            vector = vector + ad.segment_sum(msg_v, graph.dst, n) * inv_deg[:, None, None]
        ff_s, ff_v = gvp_apply(block.feedforward, scalar, vector)
        scalar = scalar + ff_s
        vector = vector + ff_v
        if normalize:
            scalar = _layer_norm_scalar(scalar)
            vector = _rescale_vector(vector)
    return GvpState(scalar=scalar, vector=vector)


def structure_forward(blocks, graph: SpatialGraph, state: GvpState,
                      normalize: bool = True) -> GvpState:
    return run_message_passing(blocks, graph, state, normalize)


def surface_forward(blocks, graph: SpatialGraph, state: GvpState,
                    normalize: bool = True) -> GvpState:
    return run_message_passing(blocks, graph, state, normalize)


def _mlp2(parts, w1, b1, w2, b2) -> Tensor:
    return ad.linear_split([ad.relu(ad.linear_split(parts, w1, b1))], w2, b2)


def surface_init(init_params: dict, residue_scalar: Tensor, cloud_features,
                 nn_idx: np.ndarray, nn_dist: np.ndarray,
                 vector_dim: int) -> GvpState:
    """Surface-node initialization: each point averages an MLP of its
    nearest residues' scalar features (with distances), concatenates its
    geometric features, and runs a second MLP. Vectors start at zero."""
    n_s, k = nn_idx.shape
    rows = ad.gather(residue_scalar, nn_idx.reshape(-1))
    dist = Tensor(nn_dist.reshape(-1, 1))
    inner = _mlp2([rows, dist],
                  init_params["inner_w1"], init_params["inner_b1"],
                  init_params["inner_w2"], init_params["inner_b2"])
    pooled = ad.tmean(ad.reshape(inner, (n_s, k, inner.shape[1])), axis=1)
    outer = _mlp2([Tensor(cloud_features), pooled],
                  init_params["outer_w1"], init_params["outer_b1"],
                  init_params["outer_w2"], init_params["outer_b2"])
    zeros = Tensor(np.zeros((n_s, vector_dim, 3)))
    return GvpState(scalar=outer, vector=zeros)


def fuse_residue_surface(h_res: GvpState, h_surf: GvpState,
                         fuse_idx: np.ndarray,
                         scalar_only: bool = False) -> GvpState:
    """Add the mean state of each residue's nearest surface points."""
    n_r, k = fuse_idx.shape
    flat = fuse_idx.reshape(-1)
    s_mean = ad.tmean(
        ad.reshape(ad.gather(h_surf.scalar, flat), (n_r, k, h_surf.scalar.shape[1])),
        axis=1)
    scalar = h_res.scalar + s_mean
    if scalar_only:
        return GvpState(scalar=scalar, vector=h_res.vector)
    v_shape = (n_r, k) + h_surf.vector.shape[1:]
    v_mean = ad.tmean(ad.reshape(ad.gather(h_surf.vector, flat), v_shape), axis=1)
    return GvpState(scalar=scalar, vector=h_res.vector + v_mean)


# ---------------------------------------------------------------------------
# model
# ---------------------------------------------------------------------------

class FitnessModel:
    """Holds parameters for the mode it was built in and runs forward passes.

    A model built in s3f mode carries both stacks and can also run the s2f
    and surf_only ablations; single-stack models only run their own mode.
    """

    def __init__(self, config: ModelConfig):
        self.config = config
        self.params: dict = {}
        self._mix_cache: dict = {}
        rng = np.random.default_rng(config.seed)
        d, dv = config.scalar_dim, config.vector_dim
        if config.embedder == "toy":
            self._param("embed.table", rng.standard_normal(
                (N_RESIDUE_TYPES + 1, config.embed_dim)))
        else:
            self._param("embed.mask_vec", rng.standard_normal(
                (1, config.embed_dim)) / np.sqrt(config.embed_dim))
            self._param("embed.corrupt_table", rng.standard_normal(
                (N_RESIDUE_TYPES, config.embed_dim)) / np.sqrt(config.embed_dim))
        self._linear(rng, "adapter", config.embed_dim, d)
        if config.mode in ("s2f", "s3f"):
            self.structure_blocks = [
                self._block(rng, f"structure.{i}") for i in range(config.structure_layers)]
        else:
            self.structure_blocks = None
        if config.mode in ("s3f", "surf_only"):
            h = config.init_hidden
            self._linear(rng, "surface_init.inner1", d + 1, h)
            self._linear(rng, "surface_init.inner2", h, d)
            self._linear(rng, "surface_init.outer1", config.surface_feat_dim + d, h)
            self._linear(rng, "surface_init.outer2", h, d)
            self.surface_blocks = [
                self._block(rng, f"surface.{i}") for i in range(config.surface_layers)]
        else:
            self.surface_blocks = None
        self._param("head.w", rng.standard_normal((d, N_RESIDUE_TYPES))
                    * config.head_init / np.sqrt(d))
        self._param("head.b", np.zeros(N_RESIDUE_TYPES))

    # ---- parameter plumbing ----

    def _param(self, name: str, array) -> Parameter:
        p = Parameter(np.asarray(array, dtype=np.float64))
        self.params[name] = p
        return p

    def _linear(self, rng, name: str, d_in: int, d_out: int):
        self._param(f"{name}.w", rng.standard_normal((d_in, d_out)) / np.sqrt(d_in))
        self._param(f"{name}.b", np.zeros(d_out))

    def _gvp(self, rng, name: str, s_in: int, v_in: int, s_out: int,
             v_out: int) -> GvpParams:
        d_h = max(v_in, v_out)
        return GvpParams(
            w_h=self._param(f"{name}.w_h",
                            rng.standard_normal((d_h, v_in)) / np.sqrt(v_in)),
            w_mu=self._param(f"{name}.w_mu",
                             rng.standard_normal((v_out, d_h)) / np.sqrt(d_h)),
            w_m=self._param(f"{name}.w_m",
                            rng.standard_normal((s_in + d_h, s_out))
                            / np.sqrt(s_in + d_h)),
            b_m=self._param(f"{name}.b_m", np.zeros(s_out)),
            w_g=self._param(f"{name}.w_g",
                            rng.standard_normal((s_out, v_out)) / np.sqrt(s_out)),
            b_g=self._param(f"{name}.b_g", np.zeros(v_out)),
        )

    def _block(self, rng, name: str) -> GvpBlock:
        cfg = self.config
        return GvpBlock(
            message=self._gvp(rng, f"{name}.msg",
                              cfg.scalar_dim + cfg.rbf_kernels, cfg.vector_dim + 1,
                              cfg.scalar_dim, cfg.vector_dim),
            feedforward=self._gvp(rng, f"{name}.ff", cfg.scalar_dim,
                                  cfg.vector_dim, cfg.scalar_dim, cfg.vector_dim),
        )

    def zero_grad(self):
        for p in self.params.values():
            p.grad = None

    def _init_params(self, prefix: str = "surface_init") -> dict:
        return {
            "inner_w1": self.params[f"{prefix}.inner1.w"],
            "inner_b1": self.params[f"{prefix}.inner1.b"],
            "inner_w2": self.params[f"{prefix}.inner2.w"],
            "inner_b2": self.params[f"{prefix}.inner2.b"],
            "outer_w1": self.params[f"{prefix}.outer1.w"],
            "outer_b1": self.params[f"{prefix}.outer1.b"],
            "outer_w2": self.params[f"{prefix}.outer2.w"],
            "outer_b2": self.params[f"{prefix}.outer2.b"],
        }

    # ---- embeddings ----

    def _window_mixer(self, n: int) -> np.ndarray:
        cached = self._mix_cache.get(n)
        if cached is not None:
            return cached
        hw = self.config.window_halfwidth
        mix = np.zeros((n, n))
        for i in range(n):
            lo, hi = max(0, i - hw), min(n, i + hw + 1)
            mix[i, lo:hi] = 1.0 / (hi - lo)
        self._mix_cache[n] = mix
        return mix

    def embed(self, protein: Protein, masked_positions,
              corruption: Corruption = None,
              embeddings: ResidueEmbeddings = None,
              allow_unmasked_embeddings: bool = False) -> Tensor:
        """Initial residue scalar features (after the adapter)."""
        cfg = self.config
        masked = np.asarray(sorted(int(p) for p in masked_positions), dtype=np.int64)
        if corruption is None:
            corruption = Corruption(
                corrupted_sequence=protein.sequence.copy(), mask_positions=masked)
        if cfg.embedder == "toy":
            ids = corruption.corrupted_sequence.copy()
            ids[corruption.mask_positions] = MASK_TOKEN
            rows = ad.gather(self.params["embed.table"], ids)
            mixed = Tensor(self._window_mixer(protein.n_residues)) @ rows
        else:
            if embeddings is None:
                raise DataError("file-mode model requires precomputed embeddings")
            if embeddings.n_residues != protein.n_residues:
                raise DataError("embedding row count does not match protein length")
            if embeddings.dim != cfg.embed_dim:
                raise DataError(
                    f"embedding dim {embeddings.dim} != model embed_dim {cfg.embed_dim}")
            expected = mask_context_tag(masked)
            if embeddings.context_tag == expected:
                mixed = Tensor(embeddings.rows)
            elif embeddings.context_tag == "" and allow_unmasked_embeddings:
                # training-time substitution on unmasked rows: hide masked
                # rows behind the trainable mask vector, corrupted rows
                # behind the trainable corruption table
                sub_idx = np.concatenate([
                    corruption.mask_positions, corruption.random_positions])
                parts = []
                if len(corruption.mask_positions):
                    parts.append(ad.gather(
                        self.params["embed.mask_vec"],
                        np.zeros(len(corruption.mask_positions), dtype=np.int64)))
                if len(corruption.random_positions):
                    parts.append(ad.gather(
                        self.params["embed.corrupt_table"],
                        corruption.corrupted_sequence[corruption.random_positions]))
                if parts:
                    rows = parts[0] if len(parts) == 1 else ad.concat(parts, axis=0)
                    mixed = ad.substitute_rows(Tensor(embeddings.rows), sub_idx, rows)
                else:
                    mixed = Tensor(embeddings.rows)
            else:
                raise DataError(
                    f"embedding context tag {embeddings.context_tag!r} does not "
                    f"match masked positions (expected {expected!r})")
        return ad.linear_split([mixed], self.params["adapter.w"],
                               self.params["adapter.b"])

    # ---- forward ----

    def _check_mode(self, mode: str):
        if mode not in MODES:
            raise DataError(f"unknown mode {mode!r}")
        if mode in ("s2f", "s3f") and self.structure_blocks is None:
            raise DataError(f"model built for {self.config.mode!r} cannot run {mode!r}")
        if mode in ("s3f", "surf_only") and self.surface_blocks is None:
            raise DataError(f"model built for {self.config.mode!r} cannot run {mode!r}")

    def forward_logits(self, protein: Protein, masked_positions, *,
                       mode: str = None,
                       embeddings: ResidueEmbeddings = None,
                       cloud: SurfacePointCloud = None,
                       corruption: Corruption = None,
                       structure_graph: SpatialGraph = None,
                       allow_unmasked_embeddings: bool = False) -> Tensor:
        """Log-softmax rows over the 20 residue types at the masked positions
        (sorted ascending)."""
        cfg = self.config
        mode = mode or cfg.mode
        self._check_mode(mode)
        masked = np.asarray(sorted(set(int(p) for p in masked_positions)),
                            dtype=np.int64)
        if len(masked) and (masked[0] < 0 or masked[-1] >= protein.n_residues):
            raise DataError("masked position out of range")
        h0_scalar = self.embed(protein, masked, corruption=corruption,
                               embeddings=embeddings,
                               allow_unmasked_embeddings=allow_unmasked_embeddings)
        n_r = protein.n_residues
        state0 = GvpState(scalar=h0_scalar,
                          vector=Tensor(np.zeros((n_r, cfg.vector_dim, 3))))
        if mode in ("s2f", "s3f"):
            graph = structure_graph
            if graph is None:
                graph = build_radius_graph(protein.ca_coords, cfg.radius_cutoff,
                                           rbf=cfg.rbf)
            h_res = run_message_passing(self.structure_blocks, graph, state0,
                                        normalize=cfg.normalize)
        else:
            h_res = state0
        if mode in ("s3f", "surf_only"):
            if cloud is None or cloud.n_points == 0:
                raise DataError(f"mode {mode!r} requires a surface cloud")
            if cloud.features is None:
                raise DataError("surface cloud lacks geometric features")
            if cloud.features.shape[1] != cfg.surface_feat_dim:
                raise DataError(
                    f"cloud feature dim {cloud.features.shape[1]} != "
                    f"model surface_feat_dim {cfg.surface_feat_dim}")
            if n_r < cfg.init_neighbors:
                raise DataError(
                    f"surface init needs >= {cfg.init_neighbors} residues")
            nn_idx, nn_dist = cross_knn(cloud.points, protein.ca_coords,
                                        cfg.init_neighbors)
            h_surf0 = surface_init(self._init_params(), h0_scalar,
                                   cloud.features, nn_idx, nn_dist,
                                   cfg.vector_dim)
            sgraph = build_knn_graph(cloud.points, cfg.surface_knn, rbf=cfg.rbf)
            h_surf = run_message_passing(self.surface_blocks, sgraph, h_surf0,
                                         normalize=cfg.normalize)
            k_fuse = min(cfg.fuse_neighbors, cloud.n_points)
            fuse_idx, _ = cross_knn(protein.ca_coords, cloud.points, k_fuse)
            h_res = fuse_residue_surface(h_res, h_surf, fuse_idx,
                                         scalar_only=cfg.fuse_scalar_only)
        rows = ad.gather(h_res.scalar, masked)
        logits = ad.linear_split([rows], self.params["head.w"],
                                 self.params["head.b"])
        return ad.log_softmax(logits)

    def loss(self, log_probs: Tensor, targets) -> Tensor:
        """Mean cross-entropy of the target types under the given rows."""
        targets = np.asarray(targets, dtype=np.int64)
        if len(targets) == 0:
            raise DataError("loss needs at least one masked position")
        picked = ad.select_rc(log_probs, np.arange(len(targets)), targets)
        return -ad.tmean(picked)


# ---------------------------------------------------------------------------
# checkpoints
# ---------------------------------------------------------------------------

def save_checkpoint(model: FitnessModel, path) -> None:
    with open(path, "wb") as fh:
        fh.write(CHECKPOINT_MAGIC)
        blob = model.config.to_json().encode("utf-8")
        fh.write(struct.pack("<II", CHECKPOINT_VERSION, len(blob)))
        fh.write(blob)
        names = sorted(model.params)
        fh.write(struct.pack("<I", len(names)))
        for name in names:
            data = model.params[name].data
            encoded = name.encode("utf-8")
            fh.write(struct.pack("<I", len(encoded)))
            fh.write(encoded)
            fh.write(struct.pack("<I", data.ndim))
            fh.write(struct.pack(f"<{data.ndim}I", *data.shape))
            fh.write(np.ascontiguousarray(data, dtype="<f4").tobytes())


def load_checkpoint(path) -> FitnessModel:
    from pathlib import Path
    path = Path(path)
    if not path.exists():
        raise DataError(f"checkpoint not found: {path}")
    blob = path.read_bytes()
    if blob[:4] != CHECKPOINT_MAGIC:
        raise DataError(f"{path}: magic mismatch (not an S3FC file)")
    version, cfg_len = struct.unpack("<II", blob[4:12])
    if version != CHECKPOINT_VERSION:
        raise DataError(f"{path}: unsupported checkpoint version {version}")
    offset = 12
    config = ModelConfig.from_json(blob[offset:offset + cfg_len].decode("utf-8"))
    offset += cfg_len
    model = FitnessModel(config)
    (n_tensors,) = struct.unpack("<I", blob[offset:offset + 4])
    offset += 4
    for _ in range(n_tensors):
        (name_len,) = struct.unpack("<I", blob[offset:offset + 4])
        offset += 4
        name = blob[offset:offset + name_len].decode("utf-8")
        offset += name_len
        (ndim,) = struct.unpack("<I", blob[offset:offset + 4])
        offset += 4
        shape = struct.unpack(f"<{ndim}I", blob[offset:offset + 4 * ndim])
        offset += 4 * ndim
        count = int(np.prod(shape)) if ndim else 1
        data = np.frombuffer(blob[offset:offset + 4 * count], dtype="<f4")
        offset += 4 * count
        if name not in model.params:
            raise DataError(f"{path}: unexpected tensor {name!r}")
        target = model.params[name]
        if tuple(shape) != target.data.shape:
            raise DataError(f"{path}: shape mismatch for {name!r}")
        target.data = data.reshape(shape).astype(np.float64)
    return model
