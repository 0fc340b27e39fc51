"""Pipeline configuration: one declarative document for every stage.

Loaded from YAML or JSON; unknown keys are rejected. Dotted-key overrides
(`a.b.c=value`) come from CLI flags or service requests.
"""

import json

import yaml
from pydantic import BaseModel, ConfigDict, Field, ValidationError

from .deformation import DeformParams
from .depth_scale import DepthSource
from .errors import ConfigError
from .loop_closure import GraphParams, LoopParams
from .tracking import DenseParams, SparseParams


class _Strict(BaseModel):
    model_config = ConfigDict(extra="forbid", validate_assignment=True)


class SurfelSettings(_Strict):
    delta_t: int = Field(200, ge=1, description="active window in frames")
    assoc_depth_rel: float = Field(0.05, gt=0)
    assoc_normal_deg: float = Field(30.0, gt=0, le=90)
    stable_confidence: float = Field(3.0, ge=0)
    max_splat_px: int = Field(13, ge=1)
    compact_interval: int = Field(50, ge=0, description="0 disables compaction")


class SparseSettings(_Strict):
    max_corners: int = Field(400, ge=20)
    patch: int = Field(9, ge=5)
    search_radius: int = Field(12, ge=2)
    min_ncc: float = Field(0.6, ge=0, le=1)
    min_matches: int = Field(10, ge=4)
    min_inliers: int = Field(10, ge=4)
    huber_px: float = Field(3.0, gt=0)
    inlier_px: float = Field(4.0, gt=0)
    max_iters: int = Field(15, ge=1)


class DenseSettings(_Strict):
    w_rgb: float = Field(0.1, ge=0)
    level_iters: list[int] = Field(default_factory=lambda: [10, 5, 4])
    huber_icp: float = Field(0.3, gt=0)
    huber_rgb: float = Field(0.1, gt=0)
    icp_dist_gate: float = Field(1.0, gt=0)
    icp_angle_gate_deg: float = Field(60.0, gt=0, le=90)
    min_assoc: int = Field(100, ge=6)


class KeyframeSettings(_Strict):
    trans: float = Field(2.0, gt=0)
    rot_deg: float = Field(10.0, gt=0)
    match_ratio: float = Field(0.5, ge=0, le=1)
    cap: int = Field(500, ge=2)


class DeformSettings(_Strict):
    w_rot: float = 1.0
    w_reg: float = 10.0
    w_con: float = 100.0
    w_pin: float = 100.0
    w_rel: float = 10.0
    max_iters: int = Field(50, ge=1)
    rel_tol: float = Field(1e-6, gt=0)
    fail_rms: float = Field(0.3, gt=0)
    rho: int = Field(5000, ge=1, description="one node per rho surfels")
    min_nodes: int = Field(16, ge=2)
    k_neighbors: int = Field(4, ge=1)
    k_influence: int = Field(4, ge=1)
    time_window: int = Field(100, ge=1)
    max_constraints: int = Field(512, ge=8)
    historical_cap: int = Field(2048, ge=0)


class LoopSettings(_Strict):
    enable_global: bool = True
    enable_local: bool = True
    radius: float = Field(7.0, gt=0)
    min_sparse_inliers: int = Field(15, ge=4)
    min_dense_assoc: int = Field(300, ge=6)
    search_radius: int = Field(28, ge=4)
    local_overlap: float = Field(0.2, ge=0, le=1)
    local_min_pixels: int = Field(400, ge=1)
    local_min_inactive: int = Field(2000, ge=0, description="cheap frustum pre-gate")
    local_interval: int = Field(1, ge=1)


class DepthSettings(_Strict):
    png_divisor: float = Field(256.0, gt=0)
    scale_mode: str = Field("none", pattern="^(none|fixed|ground_plane|reference_points|combined)$")
    fixed_scale: float = Field(1.0, gt=0)
    known_camera_height: float = Field(1.65, gt=0)
    median_window: int = Field(9, ge=1)
    lower_band: float = Field(0.4, gt=0, le=1)
    ransac_iters: int = Field(200, ge=1)
    inlier_tol: float = Field(0.05, gt=0)
    min_inliers: int = Field(300, ge=3)


class PipelineConfig(_Strict):
    seed: int = 0
    pyramid_levels: int = Field(3, ge=1, le=6)
    prefetch: bool = False
    keep_keyframe_frames: bool = True
    surfels: SurfelSettings = Field(default_factory=SurfelSettings)
    sparse: SparseSettings = Field(default_factory=SparseSettings)
    dense: DenseSettings = Field(default_factory=DenseSettings)
    keyframes: KeyframeSettings = Field(default_factory=KeyframeSettings)
    deformation: DeformSettings = Field(default_factory=DeformSettings)
    loops: LoopSettings = Field(default_factory=LoopSettings)
    depth: DepthSettings = Field(default_factory=DepthSettings)

    # -- conversions to per-module parameter bundles --

    def sparse_params(self) -> SparseParams:
        s = self.sparse
        return SparseParams(
            max_corners=s.max_corners, patch=s.patch, search_radius=s.search_radius,
            min_ncc=s.min_ncc, min_matches=s.min_matches, min_inliers=s.min_inliers,
            huber_px=s.huber_px, inlier_px=s.inlier_px, max_iters=s.max_iters,
        )

    def dense_params(self) -> DenseParams:
        d = self.dense
        return DenseParams(
            w_rgb=d.w_rgb, level_iters=tuple(d.level_iters), huber_icp=d.huber_icp,
            huber_rgb=d.huber_rgb, icp_dist_gate=d.icp_dist_gate,
            icp_angle_gate_deg=d.icp_angle_gate_deg, min_assoc=d.min_assoc,
        )

    def deform_params(self) -> DeformParams:
        d = self.deformation
        return DeformParams(
            w_rot=d.w_rot, w_reg=d.w_reg, w_con=d.w_con, w_pin=d.w_pin, w_rel=d.w_rel,
            max_iters=d.max_iters, rel_tol=d.rel_tol, fail_rms=d.fail_rms,
        )

    def graph_params(self) -> GraphParams:
        d = self.deformation
        return GraphParams(
            rho=d.rho, min_nodes=d.min_nodes, k_neighbors=d.k_neighbors,
            k_influence=d.k_influence, time_window=d.time_window,
        )

    def loop_params(self) -> LoopParams:
        lp = self.loops
        return LoopParams(
            radius=lp.radius, min_sparse_inliers=lp.min_sparse_inliers,
            min_dense_assoc=lp.min_dense_assoc, search_radius=lp.search_radius,
            local_overlap=lp.local_overlap, local_min_pixels=lp.local_min_pixels,
            max_constraints=self.deformation.max_constraints,
        )

    def depth_source(self, kind: str = "files") -> DepthSource:
        d = self.depth
        return DepthSource(
            kind=kind, scale_mode=d.scale_mode, fixed_scale=d.fixed_scale,
            known_camera_height=d.known_camera_height, median_window=d.median_window,
            lower_band=d.lower_band, ransac_iters=d.ransac_iters,
            inlier_tol=d.inlier_tol, min_inliers=d.min_inliers, seed=self.seed,
        )


def _coerce(value: str):
    low = value.lower()
    if low in ("true", "false"):
        return low == "true"
    try:
        return int(value)
    except ValueError:
        pass
    try:
        return float(value)
    except ValueError:
        return value


def _deep_set(tree: dict, dotted: str, value):
    keys = dotted.split(".")
    node = tree
    for kk in keys[:-1]:
        node = node.setdefault(kk, {})
        if not isinstance(node, dict):
            raise ConfigError(f"override {dotted}: {kk} is not a section")
    node[keys[-1]] = value


def load_config(
    path=None, overrides: list[str] | None = None, base: dict | None = None
) -> PipelineConfig:
    """Build a validated config from a file or inline dict plus key=value overrides."""
    if path is not None and base is not None:
        raise ConfigError("give either a config file or an inline config, not both")
    tree: dict = dict(base) if base else {}
    if path is not None:
        with open(path) as fh:
            text = fh.read()
        try:
            tree = (json.loads(text) if str(path).endswith(".json") else yaml.safe_load(text)) or {}
        except (json.JSONDecodeError, yaml.YAMLError) as e:
            raise ConfigError(f"{path}: {e}") from e
        if not isinstance(tree, dict):
            raise ConfigError(f"{path}: config document must be a mapping")
    for ov in overrides or []:
        if "=" not in ov:
            raise ConfigError(f"override {ov!r} must look like section.key=value")
        key, _, raw = ov.partition("=")
        _deep_set(tree, key.strip(), _coerce(raw.strip()))
    try:
        return PipelineConfig.model_validate(tree)
    except ValidationError as e:
        raise ConfigError(str(e)) from e
