"""Dense surfel model.

A flat array-of-columns store of oriented disks with confidence and
timestamps, split by fusion recency into an active part (tracked against,
fused into) and an inactive part (held fixed until a loop closure
reactivates it). Rendering is a CPU square-splat rasterizer with a
deterministic z-buffer.
"""

from dataclasses import dataclass

import numpy as np

from . import ply
from .camera import CameraIntrinsics, backproject_grid, project_points
from .errors import MonotonicityError
from .frame import Frame, compute_normals
from .se3 import RigidTransform

_LUMA = np.array([0.299, 0.587, 0.114])


@dataclass
class FusionStats:
    matched: int = 0
    inserted: int = 0
    skipped: int = 0


@dataclass(frozen=True)
class Surfel:
    """Value view of one surfel, mainly for tests and debugging."""

    position: np.ndarray
    normal: np.ndarray
    radius: float
    confidence: float
    color: np.ndarray
    t_last: int
    t_init: int


@dataclass
class ModelView:
    """Synthetic camera view of the model (or of a raw frame).

    depth/normals are in the virtual camera frame; index holds the surfel
    id per pixel (-1 where empty, and everywhere for frame-derived views,
    which carry no ids).
    """

    depth: np.ndarray
    intensity: np.ndarray
    normal: np.ndarray
    index: np.ndarray
    pose: RigidTransform
    intrinsics: CameraIntrinsics

    @property
    def valid(self) -> np.ndarray:
        return self.depth > 0


def view_from_frame(frame: Frame, pose: RigidTransform, normals=None) -> ModelView:
    """Treat a stored frame as if it were a rendered model view."""
    if normals is None:
        normals = compute_normals(frame.depth, frame.intrinsics)
    return ModelView(
        depth=np.asarray(frame.depth, dtype=np.float64),
        intensity=np.asarray(frame.intensity, dtype=np.float64),
        normal=normals,
        index=np.full(frame.depth.shape, -1, dtype=np.int64),
        pose=pose,
        intrinsics=frame.intrinsics,
    )


def reproject_view(view: ModelView, new_pose: RigidTransform) -> ModelView:
    """Re-render a view's geometry into a virtual camera at new_pose.

    Points are forward-projected with a small (2x2) splat and z-buffered;
    parallax holes stay invalid. Used to bring a stored keyframe view into
    the camera frame of a loop candidate's pose estimate.
    """
    k = view.intrinsics
    h, w = view.depth.shape
    out = ModelView(
        depth=np.zeros((h, w)),
        intensity=np.zeros((h, w)),
        normal=np.zeros((h, w, 3)),
        index=np.full((h, w), -1, dtype=np.int64),
        pose=new_pose,
        intrinsics=k,
    )
    valid = view.valid
    if not valid.any():
        return out
    pts = backproject_grid(view.depth, k)[valid]
    rel = new_pose.inverse() @ view.pose
    q = rel.apply(pts)
    nrm = view.normal[valid] @ rel.rotation.T
    inten = np.asarray(view.intensity, dtype=np.float64)[valid]
    front = q[:, 2] > 1e-6
    q, nrm, inten = q[front], nrm[front], inten[front]
    if len(q) == 0:
        return out
    uv, _ = project_points(q, k)
    pix_parts, z_parts, loc_parts = [], [], []
    local = np.arange(len(q))
    u0 = np.floor(uv[:, 0]).astype(np.int64)
    v0 = np.floor(uv[:, 1]).astype(np.int64)
    for dy in (0, 1):
        for dx in (0, 1):
            uu, vv = u0 + dx, v0 + dy
            ok = (uu >= 0) & (uu < w) & (vv >= 0) & (vv < h)
            if ok.any():
                pix_parts.append(vv[ok] * w + uu[ok])
                z_parts.append(q[ok, 2])
                loc_parts.append(local[ok])
    if not pix_parts:
        return out
    pix = np.concatenate(pix_parts)
    zc = np.concatenate(z_parts)
    loc = np.concatenate(loc_parts)
    order = np.lexsort((loc, zc, pix))
    pix, zc, loc = pix[order], zc[order], loc[order]
    first = np.ones(len(pix), dtype=bool)
    first[1:] = pix[1:] != pix[:-1]
    pix, zc, loc = pix[first], zc[first], loc[first]
    out.depth.flat[pix] = zc
    out.intensity.flat[pix] = inten[loc]
    out.normal.reshape(-1, 3)[pix] = nrm[loc]
    return out


class SurfelMap:
    """Flat surfel list with an active/inactive temporal partition.

    Surfels are appended on insertion and only removed by compaction
    (unstable surfels that have not been re-observed within the active
    window). A surfel is ACTIVE iff current_time - t_last < delta_t.
    """

    def __init__(
        self,
        delta_t: int = 200,
        assoc_depth_rel: float = 0.05,
        assoc_normal_deg: float = 30.0,
        stable_confidence: float = 3.0,
        max_splat_px: int = 13,
        compact_interval: int = 50,
        initial_capacity: int = 65536,
    ):
        self.delta_t = int(delta_t)
        self.assoc_depth_rel = float(assoc_depth_rel)
        self.assoc_normal_cos = float(np.cos(np.deg2rad(assoc_normal_deg)))
        self.stable_confidence = float(stable_confidence)
        self.max_splat_px = int(max_splat_px)
        self.compact_interval = int(compact_interval)
        self.current_time = 0
        self._n = 0
        cap = int(initial_capacity)
        self._pos = np.zeros((cap, 3))
        self._nrm = np.zeros((cap, 3))
        self._rad = np.zeros(cap)
        self._conf = np.zeros(cap)
        self._col = np.zeros((cap, 3))
        self._t_last = np.zeros(cap, dtype=np.int64)
        self._t_init = np.zeros(cap, dtype=np.int64)

    # -- storage ------------------------------------------------------------

    def __len__(self):
        return self._n

    @property
    def positions(self) -> np.ndarray:
        return self._pos[: self._n]

    @property
    def normals(self) -> np.ndarray:
        return self._nrm[: self._n]

    @property
    def radii(self) -> np.ndarray:
        return self._rad[: self._n]

    @property
    def confidences(self) -> np.ndarray:
        return self._conf[: self._n]

    @property
    def colors(self) -> np.ndarray:
        return self._col[: self._n]

    @property
    def t_last(self) -> np.ndarray:
        return self._t_last[: self._n]

    @property
    def t_init(self) -> np.ndarray:
        return self._t_init[: self._n]

    def surfel(self, i: int) -> Surfel:
        return Surfel(
            self._pos[i].copy(), self._nrm[i].copy(), float(self._rad[i]),
            float(self._conf[i]), self._col[i].copy(),
            int(self._t_last[i]), int(self._t_init[i]),
        )

    def active_mask(self) -> np.ndarray:
        return (self.current_time - self.t_last) < self.delta_t

    def _grow(self, extra: int):
        need = self._n + extra
        cap = len(self._rad)
        if need <= cap:
            return
        while cap < need:
            cap *= 2
        for name in ("_pos", "_nrm", "_col"):
            old = getattr(self, name)
            new = np.zeros((cap, 3), dtype=old.dtype)
            new[: self._n] = old[: self._n]
            setattr(self, name, new)
        for name in ("_rad", "_conf", "_t_last", "_t_init"):
            old = getattr(self, name)
            new = np.zeros(cap, dtype=old.dtype)
            new[: self._n] = old[: self._n]
            setattr(self, name, new)

    def _append(self, pos, nrm, rad, conf, col, t):
        m = len(pos)
        self._grow(m)
        s = slice(self._n, self._n + m)
        self._pos[s] = pos
        self._nrm[s] = nrm
        self._rad[s] = rad
        self._conf[s] = conf
        self._col[s] = col
        self._t_last[s] = t
        self._t_init[s] = t
        self._n += m

    # -- rendering ----------------------------------------------------------

    def _select(self, which: str, min_confidence: float) -> np.ndarray:
        active = self.active_mask()
        if which == "active":
            mask = active
        elif which == "inactive":
            mask = ~active
        elif which == "all":
            mask = np.ones(self._n, dtype=bool)
        else:
            raise ValueError(f"unknown selection {which!r}")
        if min_confidence > 0:
            mask = mask & (self.confidences >= min_confidence)
        return np.nonzero(mask)[0]

    def _point_render(
        self, pose: RigidTransform, k: CameraIntrinsics, which: str, min_confidence: float
    ) -> tuple[np.ndarray, np.ndarray]:
        """Z-buffered 1-pixel index map: (surfel id per pixel, camera z).

        Unlike the splatted view this never lets a surfel claim pixels
        beyond its own projection, which fusion association relies on.
        """
        h, w = k.height, k.width
        index = np.full((h, w), -1, dtype=np.int64)
        zbuf = np.zeros((h, w))
        ids = self._select(which, min_confidence)
        if len(ids) == 0:
            return index, zbuf
        inv = pose.inverse()
        p_cam = inv.apply(self._pos[ids])
        keep = p_cam[:, 2] > 1e-6
        ids, p_cam = ids[keep], p_cam[keep]
        if len(ids) == 0:
            return index, zbuf
        uv, _ = project_points(p_cam, k)
        ui = np.round(uv[:, 0]).astype(np.int64)
        vi = np.round(uv[:, 1]).astype(np.int64)
        ok = (ui >= 0) & (ui < w) & (vi >= 0) & (vi < h)
        ids, ui, vi, z = ids[ok], ui[ok], vi[ok], p_cam[ok, 2]
        if len(ids) == 0:
            return index, zbuf
        pix = vi * w + ui
        order = np.lexsort((ids, z, pix))
        pix, z, ids = pix[order], z[order], ids[order]
        first = np.ones(len(pix), dtype=bool)
        first[1:] = pix[1:] != pix[:-1]
        index.flat[pix[first]] = ids[first]
        zbuf.flat[pix[first]] = z[first]
        return index, zbuf

    def predict_view(
        self,
        pose: RigidTransform,
        k: CameraIntrinsics,
        which: str = "active",
        min_confidence: float = 0.0,
    ) -> ModelView:
        """Render the selected surfels into a virtual camera at `pose`.

        Each surfel is back-face culled, projected, and splatted as a
        centered square of side max(1, round(2 r fx / z)) pixels (rounded
        up to odd, capped at max_splat_px). Per pixel the nearest surfel
        wins; ties break on the lower surfel id so rendering is
        deterministic.
        """
        h, w = k.height, k.width
        view = ModelView(
            depth=np.zeros((h, w)),
            intensity=np.zeros((h, w)),
            normal=np.zeros((h, w, 3)),
            index=np.full((h, w), -1, dtype=np.int64),
            pose=pose,
            intrinsics=k,
        )
        ids = self._select(which, min_confidence)
        if len(ids) == 0:
            return view

        inv = pose.inverse()
        p_cam = inv.apply(self._pos[ids])
        n_cam = inv.rotate(self._nrm[ids])
        keep = p_cam[:, 2] > 1e-6
        # Back-face culling: normals point at the camera, so n . p < 0 is front.
        keep &= np.einsum("ij,ij->i", n_cam, p_cam) < 0
        ids, p_cam, n_cam = ids[keep], p_cam[keep], n_cam[keep]
        if len(ids) == 0:
            return view

        uv, _ = project_points(p_cam, k)
        ui = np.round(uv[:, 0]).astype(np.int64)
        vi = np.round(uv[:, 1]).astype(np.int64)
        z = p_cam[:, 2]
        side = np.maximum(1, np.round(2.0 * self._rad[ids] * k.fx / z)).astype(np.int64)
        half = np.minimum(side // 2, (self.max_splat_px - 1) // 2)

        inside = (ui >= -half) & (ui < w + half) & (vi >= -half) & (vi < h + half)
        ids, ui, vi, z, half = ids[inside], ui[inside], vi[inside], z[inside], half[inside]
        n_cam = n_cam[inside]
        if len(ids) == 0:
            return view

        pix_parts, z_parts, loc_parts = [], [], []
        local = np.arange(len(ids))
        for hval in np.unique(half):
            sel = half == hval
            u0, v0, zs, ls = ui[sel], vi[sel], z[sel], local[sel]
            for dy in range(-hval, hval + 1):
                vv = v0 + dy
                okv = (vv >= 0) & (vv < h)
                for dx in range(-hval, hval + 1):
                    uu = u0 + dx
                    ok = okv & (uu >= 0) & (uu < w)
                    if not ok.any():
                        continue
                    pix_parts.append(vv[ok] * w + uu[ok])
                    z_parts.append(zs[ok])
                    loc_parts.append(ls[ok])
        if not pix_parts:
            return view
        pix = np.concatenate(pix_parts)
        zc = np.concatenate(z_parts)
        loc = np.concatenate(loc_parts)

        order = np.lexsort((ids[loc], zc, pix))
        pix, zc, loc = pix[order], zc[order], loc[order]
        first = np.ones(len(pix), dtype=bool)
        first[1:] = pix[1:] != pix[:-1]
        pix, zc, loc = pix[first], zc[first], loc[first]

        win = ids[loc]
        view.depth.flat[pix] = zc
        view.index.flat[pix] = win
        view.intensity.flat[pix] = self._col[win] @ _LUMA
        view.normal.reshape(-1, 3)[pix] = n_cam[loc]
        return view

    # -- fusion -------------------------------------------------------------

    def fuse_frame(
        self, frame: Frame, pose: RigidTransform, normals: np.ndarray | None = None
    ) -> FusionStats:
        """Fuse a frame at its refined pose into the active model.

        Association searches a 3x3 neighborhood of a 1-pixel index map for
        the candidate surfel closest in depth that passes the relative
        depth and normal-angle gates. Matches are averaged in (weights =
        confidence vs 1) and refresh the surfel's timestamp; the rest
        insert new surfels. Pixels whose live normal is undefined are
        skipped entirely, so fusing the same frame at the same pose twice
        is a pure re-match with zero insertions.
        """
        k = frame.intrinsics
        if normals is None:
            normals = compute_normals(frame.depth, k)
        index_map, z_map = self._point_render(pose, k, which="active", min_confidence=0.0)

        depth = np.asarray(frame.depth, dtype=np.float64)
        has_depth = depth > 0
        has_normal = np.einsum("ijk,ijk->ij", normals, normals) > 0.5
        usable = has_depth & has_normal
        stats = FusionStats(skipped=int((has_depth & ~has_normal).sum()))
        if not usable.any():
            return stats

        pts_cam = backproject_grid(depth, k)[usable]
        n_cam = normals[usable]
        colors = np.asarray(frame.color, dtype=np.float64)[usable]
        d_live = depth[usable]

        h, w = depth.shape
        vs, us = np.nonzero(usable)
        inv_rot_t = pose.rotation  # world normal -> camera: n_w @ R = R^T n_w rows
        n_live = n_cam
        best_id = np.full(len(us), -1, dtype=np.int64)
        best_dz = np.full(len(us), np.inf)
        gate = self.assoc_depth_rel * d_live
        for dy in (-1, 0, 1):
            vv = np.clip(vs + dy, 0, h - 1)
            for dx in (-1, 0, 1):
                uu = np.clip(us + dx, 0, w - 1)
                sid = index_map[vv, uu]
                got = sid >= 0
                if not got.any():
                    continue
                dz = np.full(len(us), np.inf)
                dz[got] = np.abs(z_map[vv[got], uu[got]] - d_live[got])
                ok = got & (dz < gate)
                if ok.any():
                    n_surf_cam = self._nrm[sid[ok]] @ inv_rot_t
                    dot = np.einsum("ij,ij->i", n_surf_cam, n_live[ok])
                    ok[np.nonzero(ok)[0][dot <= self.assoc_normal_cos]] = False
                better = ok & (
                    (dz < best_dz) | ((dz == best_dz) & (sid < best_id))
                )
                best_id[better] = sid[better]
                best_dz[better] = dz[better]
        matched = best_id >= 0
        sid = best_id

        pts_w = pose.apply(pts_cam)
        n_w = n_cam @ pose.rotation.T
        nz = np.abs(n_cam[:, 2])
        radius = np.sqrt(2.0) * d_live / k.fx / np.maximum(nz, 0.5)

        if matched.any():
            mids = sid[matched]
            # A splat can cover several live pixels; accumulate measurement
            # sums per surfel so the update is order-independent.
            uniq, inverse = np.unique(mids, return_inverse=True)
            m = np.bincount(inverse).astype(np.float64)
            sum_p = np.zeros((len(uniq), 3))
            sum_n = np.zeros((len(uniq), 3))
            sum_c = np.zeros((len(uniq), 3))
            sum_r = np.zeros(len(uniq))
            np.add.at(sum_p, inverse, pts_w[matched])
            np.add.at(sum_n, inverse, n_w[matched])
            np.add.at(sum_c, inverse, colors[matched])
            np.add.at(sum_r, inverse, radius[matched])
            c = self._conf[uniq]
            tot = c + m
            self._pos[uniq] = (c[:, None] * self._pos[uniq] + sum_p) / tot[:, None]
            blended = c[:, None] * self._nrm[uniq] + sum_n
            norm = np.linalg.norm(blended, axis=1)
            norm[norm < 1e-12] = 1.0
            self._nrm[uniq] = blended / norm[:, None]
            self._col[uniq] = (c[:, None] * self._col[uniq] + sum_c) / tot[:, None]
            self._rad[uniq] = (c * self._rad[uniq] + sum_r) / tot
            self._conf[uniq] = tot
            self._t_last[uniq] = frame.index
            stats.matched = int(matched.sum())

        insert = ~matched
        if insert.any():
            self._append(
                pts_w[insert], n_w[insert], radius[insert],
                np.ones(int(insert.sum())), colors[insert], frame.index,
            )
            stats.inserted = int(insert.sum())
        return stats

    # -- temporal partition ---------------------------------------------------

    def advance_time(self, t: int):
        """Move the map clock forward; the partition is re-evaluated lazily."""
        if t < self.current_time:
            raise MonotonicityError(f"time moved backwards: {self.current_time} -> {t}")
        stepped = t > self.current_time
        self.current_time = int(t)
        if stepped and self.compact_interval > 0 and t % self.compact_interval == 0:
            self.compact()

    def compact(self) -> int:
        """Drop surfels that stayed unstable past the active window."""
        stale = (self.confidences < self.stable_confidence) & (
            (self.current_time - self.t_last) > self.delta_t
        )
        if not stale.any():
            return 0
        keep = np.nonzero(~stale)[0]
        m = len(keep)
        self._pos[:m] = self._pos[keep]
        self._nrm[:m] = self._nrm[keep]
        self._rad[:m] = self._rad[keep]
        self._conf[:m] = self._conf[keep]
        self._col[:m] = self._col[keep]
        self._t_last[:m] = self._t_last[keep]
        self._t_init[:m] = self._t_init[keep]
        removed = self._n - m
        self._n = m
        return removed

    def _in_frustum(self, ids: np.ndarray, pose: RigidTransform, k: CameraIntrinsics):
        p_cam = pose.inverse().apply(self._pos[ids])
        keep = p_cam[:, 2] > 1e-6
        uv, _ = project_points(p_cam, k)
        with np.errstate(invalid="ignore"):
            keep &= (
                (uv[:, 0] >= 0) & (uv[:, 0] <= k.width - 1)
                & (uv[:, 1] >= 0) & (uv[:, 1] <= k.height - 1)
            )
        return keep

    def visible_count(
        self, pose: RigidTransform, k: CameraIntrinsics, which: str = "inactive"
    ) -> int:
        """Cheap frustum count (no rendering) used to gate loop attempts."""
        ids = self._select(which, 0.0)
        if len(ids) == 0:
            return 0
        return int(self._in_frustum(ids, pose, k).sum())

    def reactivate_in_view(self, pose: RigidTransform, k: CameraIntrinsics, t: int) -> int:
        """Stamp inactive surfels inside the view frustum as active at time t."""
        ids = self._select("inactive", 0.0)
        if len(ids) == 0:
            return 0
        hit = ids[self._in_frustum(ids, pose, k)]
        self._t_last[hit] = t
        return int(len(hit))

    # -- persistence ----------------------------------------------------------

    def export_ply(self, path, min_confidence: float = 0.0, binary: bool = True):
        keep = self.confidences >= min_confidence
        ply.write_surfel_ply(
            path,
            self.positions[keep], self.normals[keep], self.colors[keep],
            self.radii[keep], self.confidences[keep], binary=binary,
        )

    def save_state(self, path):
        np.savez_compressed(
            path,
            positions=self.positions, normals=self.normals, radii=self.radii,
            confidences=self.confidences, colors=self.colors,
            t_last=self.t_last, t_init=self.t_init,
            current_time=self.current_time, delta_t=self.delta_t,
        )

    @staticmethod
    def load_state(path) -> "SurfelMap":
        data = np.load(path)
        m = SurfelMap(delta_t=int(data["delta_t"]))
        n = len(data["radii"])
        m._grow(n)
        m._n = n
        m._pos[:n] = data["positions"]
        m._nrm[:n] = data["normals"]
        m._rad[:n] = data["radii"]
        m._conf[:n] = data["confidences"]
        m._col[:n] = data["colors"]
        m._t_last[:n] = data["t_last"]
        m._t_init[:n] = data["t_init"]
        m.current_time = int(data["current_time"])
        return m
