"""Count metrics, greedy instance matching, confusion matrices and reports."""
from __future__ import annotations

import csv
import io
import json
from dataclasses import dataclass, field
from pathlib import Path
from typing import Sequence

import numpy as np

from .core import Box, box_iou_matrix, mask_bbox, rasterize_rings

MAPE_MODES = ("per-image", "aggregate")
CLASS_LABELS = ("1spp", "2spp", "3spp", "4spp")


@dataclass(frozen=True)
class CountSeries:
    pairs: tuple[tuple[str, int, int], ...]

    def __post_init__(self):
        pairs = tuple((str(i), int(p), int(g)) for i, p, g in self.pairs)
        ids = [i for i, _, _ in pairs]
        if len(set(ids)) != len(ids):
            dup = sorted({i for i in ids if ids.count(i) > 1})
            raise ValueError(f"duplicate image ids in count series: {dup}")
        for i, p, g in pairs:
            if g < 0 or p < 0:
                raise ValueError(f"{i}: counts must be non-negative (pred {p}, gt {g})")
        object.__setattr__(self, "pairs", pairs)

    @classmethod
    def from_lists(cls, preds: Sequence[int], gts: Sequence[int], ids: Sequence[str] | None = None):
        if len(preds) != len(gts):
            raise ValueError("preds and gts differ in length")
        ids = ids if ids is not None else [str(k) for k in range(len(preds))]
        return cls(tuple(zip(ids, preds, gts)))

    def arrays(self) -> tuple[np.ndarray, np.ndarray]:
        p = np.array([p for _, p, _ in self.pairs], dtype=np.int64)
        g = np.array([g for _, _, g in self.pairs], dtype=np.int64)
        return p, g


def mae(series: CountSeries) -> float:
    if not series.pairs:
        raise ValueError("MAE of an empty series")
    p, g = series.arrays()
    return float(np.abs(p - g).mean())


def mape(series: CountSeries, mode: str = "per-image") -> float:
    """Percent error. ``per-image`` averages |p-g|/g; ``aggregate`` is sum|p-g| / sum g."""
    if not series.pairs:
        raise ValueError("MAPE of an empty series")
    p, g = series.arrays()
    if mode == "per-image":
        if (g == 0).any():
            raise ValueError("MAPE undefined at zero ground truth")
        return float(100.0 * np.mean(np.abs(p - g) / g))
    if mode == "aggregate":
        if g.sum() == 0:
            raise ValueError("MAPE undefined at zero ground truth")
        return float(100.0 * np.abs(p - g).sum() / g.sum())
    raise ValueError(f"unknown MAPE mode {mode!r}; expected one of {MAPE_MODES}")


# --- matching -----------------------------------------------------------------------

@dataclass(frozen=True)
class MatchResult:
    matches: tuple[tuple[int, int, float], ...]
    unmatched_pred: tuple[int, ...]
    unmatched_gt: tuple[int, ...]
    iou_threshold: float = 0.5

    def __post_init__(self):
        ps = [m[0] for m in self.matches] + list(self.unmatched_pred)
        gs = [m[1] for m in self.matches] + list(self.unmatched_gt)
        if len(set(ps)) != len(ps) or len(set(gs)) != len(gs):
            raise ValueError("an index appears more than once in a match result")
        for _, _, iou in self.matches:
            if iou < self.iou_threshold:
                raise ValueError(f"match iou {iou} below threshold {self.iou_threshold}")

    @property
    def n_pred(self) -> int:
        return len(self.matches) + len(self.unmatched_pred)

    @property
    def n_gt(self) -> int:
        return len(self.matches) + len(self.unmatched_gt)


@dataclass(frozen=True)
class MaskGeom:
    """A binary mask stored as its tight window: ``mask`` sits at ``(x0, y0)``."""

    x0: int
    y0: int
    mask: np.ndarray

    @classmethod
    def from_full(cls, mask: np.ndarray) -> "MaskGeom":
        m = np.asarray(mask, dtype=bool)
        bb = mask_bbox(m)
        if bb is None:
            return cls(0, 0, np.zeros((0, 0), dtype=bool))
        x0, y0, x1, y1 = bb
        return cls(x0, y0, m[y0:y1, x0:x1].copy())

    @classmethod
    def from_rings(cls, rings) -> "MaskGeom":
        pts = np.concatenate([np.asarray(r, dtype=float).reshape(-1, 2) for r in rings])
        x0, y0 = (int(v) for v in np.floor(pts.min(0)))
        x1, y1 = (int(v) for v in np.ceil(pts.max(0)))
        return cls(x0, y0, rasterize_rings(rings, x1 - x0, y1 - y0, origin=(x0, y0)))

    @property
    def bounds(self) -> tuple[int, int, int, int]:
        h, w = self.mask.shape
        return self.x0, self.y0, self.x0 + w, self.y0 + h

    @property
    def area(self) -> int:
        return int(self.mask.sum())

    def intersection(self, other: "MaskGeom") -> int:
        ax0, ay0, ax1, ay1 = self.bounds
        bx0, by0, bx1, by1 = other.bounds
        x0, y0, x1, y1 = max(ax0, bx0), max(ay0, by0), min(ax1, bx1), min(ay1, by1)
        if x0 >= x1 or y0 >= y1:
            return 0
        a = self.mask[y0 - self.y0 : y1 - self.y0, x0 - self.x0 : x1 - self.x0]
        b = other.mask[y0 - other.y0 : y1 - other.y0, x0 - other.x0 : x1 - other.x0]
        return int((a & b).sum())


def _as_geom(g):
    if isinstance(g, (Box, MaskGeom)):
        return g
    return MaskGeom.from_full(g)


def _geometry_key(g) -> tuple:
    g = _as_geom(g)
    if isinstance(g, Box):
        return g.xyxy
    return g.bounds + (g.area,)


def iou_matrix(pred_geoms: Sequence, gt_geoms: Sequence) -> np.ndarray:
    """Pairwise IoU of boxes (``Box``) or masks (``MaskGeom`` or full boolean arrays)."""
    if not pred_geoms or not gt_geoms:
        return np.zeros((len(pred_geoms), len(gt_geoms)))
    a = [_as_geom(g) for g in pred_geoms]
    b = [_as_geom(g) for g in gt_geoms]
    if isinstance(a[0], Box):
        return box_iou_matrix(np.array([g.xyxy for g in a]), np.array([g.xyxy for g in b]))
    out = np.zeros((len(a), len(b)))
    areas_b = [g.area for g in b]
    for i, ga in enumerate(a):
        area_a = ga.area
        for j, gb in enumerate(b):
            inter = ga.intersection(gb)
            if inter:
                out[i, j] = inter / (area_a + areas_b[j] - inter)
    return out


def match_instances(preds: Sequence, gts: Sequence, iou_threshold: float = 0.5, ious: np.ndarray | None = None) -> MatchResult:
    """Greedy class-agnostic matching.

    ``preds`` are ``(geometry, spp, confidence)``, ``gts`` are ``(geometry, spp)``.
    Predictions go in descending confidence (ties by geometry, then index);
    each takes the still-unmatched ground truth of highest IoU (ties to the
    lower index) when that IoU reaches the threshold.
    """
    if not (0.0 < iou_threshold <= 1.0):
        raise ValueError(f"iou_threshold {iou_threshold} outside (0, 1]")
    if ious is None:
        ious = iou_matrix([p[0] for p in preds], [g[0] for g in gts])
    order = sorted(range(len(preds)), key=lambda i: (-float(preds[i][2]), _geometry_key(preds[i][0]), i))
    free = np.ones(len(gts), dtype=bool)
    matches, unmatched = [], []
    for i in order:
        row = np.where(free, ious[i], -1.0) if len(gts) else np.zeros(0)
        j = int(np.argmax(row)) if row.size else -1
        if j >= 0 and row[j] >= iou_threshold:
            free[j] = False
            matches.append((i, j, float(row[j])))
        else:
            unmatched.append(i)
    return MatchResult(
        tuple(matches), tuple(sorted(unmatched)), tuple(int(j) for j in np.flatnonzero(free)), iou_threshold
    )


def max_matching_size(ious: np.ndarray, iou_threshold: float) -> int:
    """Largest cardinality of any one-to-one matching with every IoU at or above threshold."""
    from scipy.optimize import linear_sum_assignment

    if ious.size == 0:
        return 0
    ok = (ious >= iou_threshold).astype(float)
    r, c = linear_sum_assignment(-ok)
    return int(ok[r, c].sum())


# --- confusion matrix ---------------------------------------------------------------

@dataclass
class ConfusionMatrix:
    """Rows: predicted 1-4spp then ``missed``. Columns: ground-truth 1-4spp then ``false_positive``."""

    counts: np.ndarray = field(default_factory=lambda: np.zeros((5, 5), dtype=np.int64))

    ROWS = CLASS_LABELS + ("missed",)
    COLS = CLASS_LABELS + ("false_positive",)

    @property
    def matched(self) -> int:
        return int(self.counts[:4, :4].sum())

    @property
    def missed(self) -> int:
        return int(self.counts[4, :4].sum())

    @property
    def false_positives(self) -> int:
        return int(self.counts[:4, 4].sum())

    @property
    def total_gt(self) -> int:
        return self.matched + self.missed

    @property
    def total_pred(self) -> int:
        return self.matched + self.false_positives

    def __add__(self, other: "ConfusionMatrix") -> "ConfusionMatrix":
        return ConfusionMatrix(self.counts + other.counts)

    def to_dict(self) -> dict:
        return {"rows": list(self.ROWS), "cols": list(self.COLS), "counts": self.counts.tolist()}

    @classmethod
    def from_dict(cls, d: dict) -> "ConfusionMatrix":
        return cls(np.asarray(d["counts"], dtype=np.int64))

    def check(self) -> None:
        if self.counts[4, 4] != 0:
            raise AssertionError("missed/false_positive corner must be empty")
        if (self.counts < 0).any():
            raise AssertionError("negative confusion count")


def confusion_matrix(match: MatchResult, preds: Sequence, gts: Sequence) -> ConfusionMatrix:
    if match.n_pred != len(preds) or match.n_gt != len(gts):
        raise ValueError(
            f"match covers {match.n_pred} preds / {match.n_gt} gts but got {len(preds)} / {len(gts)}"
        )
    c = np.zeros((5, 5), dtype=np.int64)
    for i, j, _ in match.matches:
        c[int(preds[i][1]) - 1, int(gts[j][1]) - 1] += 1
    for j in match.unmatched_gt:
        c[4, int(gts[j][1]) - 1] += 1
    for i in match.unmatched_pred:
        c[int(preds[i][1]) - 1, 4] += 1
    cm = ConfusionMatrix(c)
    cm.check()
    if cm.total_gt != len(gts) or cm.false_positives != len(match.unmatched_pred):
        raise AssertionError("confusion marginals do not add up")
    return cm


# --- reports ------------------------------------------------------------------------

@dataclass(frozen=True)
class ImageOutcome:
    image_id: str
    pred_pods: int
    gt_pods: int
    pred_seeds: int
    gt_seeds: int


@dataclass
class CountReport:
    task: str
    method: str
    n_images: int
    pod_mae: float
    pod_mape: float | None
    seed_mae: float
    seed_mape: float | None
    mape_mode: str = "per-image"
    confusion: ConfusionMatrix | None = None
    per_image: list[ImageOutcome] = field(default_factory=list)
    config: dict | None = None

    def to_dict(self) -> dict:
        return {
            "task": self.task,
            "method": self.method,
            "n_images": self.n_images,
            "mape_mode": self.mape_mode,
            "pods": {"mae": self.pod_mae, "mape": self.pod_mape},
            "seeds": {"mae": self.seed_mae, "mape": self.seed_mape},
            "confusion": None if self.confusion is None else self.confusion.to_dict(),
            "per_image": [o.__dict__ for o in self.per_image],
            "config": self.config,
        }

    @classmethod
    def from_dict(cls, d: dict) -> "CountReport":
        return cls(
            task=d["task"],
            method=d["method"],
            n_images=d["n_images"],
            pod_mae=d["pods"]["mae"],
            pod_mape=d["pods"]["mape"],
            seed_mae=d["seeds"]["mae"],
            seed_mape=d["seeds"]["mape"],
            mape_mode=d.get("mape_mode", "per-image"),
            confusion=None if d.get("confusion") is None else ConfusionMatrix.from_dict(d["confusion"]),
            per_image=[ImageOutcome(**o) for o in d.get("per_image", [])],
            config=d.get("config"),
        )


def _safe_mape(series: CountSeries, mode: str) -> float | None:
    try:
        return mape(series, mode)
    except ValueError:
        return None


def evaluate_counts(
    task: str,
    method: str,
    truth: dict[str, tuple[int, int]],
    preds: dict[str, tuple[int, int]],
    mape_mode: str = "per-image",
    confusion: ConfusionMatrix | None = None,
    config: dict | None = None,
) -> CountReport:
    """``truth`` and ``preds`` map image id to ``(pods, seeds)``."""
    missing = sorted(set(truth) - set(preds))
    if missing:
        raise ValueError(f"missing pipeline outputs for {len(missing)} image(s): {', '.join(missing)}")
    ids = sorted(truth)
    outcomes = [ImageOutcome(i, preds[i][0], truth[i][0], preds[i][1], truth[i][1]) for i in ids]
    pods = CountSeries(tuple((o.image_id, o.pred_pods, o.gt_pods) for o in outcomes))
    seeds = CountSeries(tuple((o.image_id, o.pred_seeds, o.gt_seeds) for o in outcomes))
    return CountReport(
        task, method, len(ids), mae(pods), _safe_mape(pods, mape_mode), mae(seeds), _safe_mape(seeds, mape_mode),
        mape_mode, confusion, outcomes, config,
    )


def _fmt_mape(v: float | None) -> str:
    return "n/a" if v is None else f"{v:.2f}%"


def render_markdown(reports: Sequence[CountReport]) -> str:
    """Outdoor-style table (task | method | MAE | MAPE), an indoor seed table, and confusion matrices."""
    buf = io.StringIO()
    buf.write("## Counting error\n\n| Task | Method | MAE | MAPE |\n|---|---|---|---|\n")
    for label, attr in (("Pod counting", "pod"), ("Seed counting", "seed")):
        for k, r in enumerate(reports):
            task = label if k == 0 else ""
            buf.write(
                f"| {task} | {r.method} | {getattr(r, attr + '_mae'):.2f} | {_fmt_mape(getattr(r, attr + '_mape'))} |\n"
            )
    indoor = [r for r in reports if r.task == "indoor"]
    if indoor:
        buf.write("\n## Indoor seed counting\n\n| Method | Counting MAE | Counting MAPE |\n|---|---|---|\n")
        for r in indoor:
            buf.write(f"| {r.method} | {r.seed_mae:.2f} | {_fmt_mape(r.seed_mape)} |\n")
    for r in reports:
        if r.confusion is None:
            continue
        cm = r.confusion
        buf.write(f"\n## Confusion matrix: {r.method}\n\nRows are predictions, columns are ground truth.\n\n")
        buf.write("| pred \\ gt | " + " | ".join(cm.COLS) + " |\n")
        buf.write("|---" * (len(cm.COLS) + 1) + "|\n")
        for name, row in zip(cm.ROWS, cm.counts):
            buf.write(f"| {name} | " + " | ".join(str(int(v)) for v in row) + " |\n")
        buf.write(f"\nMatched {cm.matched} of {cm.total_gt} ground-truth pods; {cm.false_positives} false positives.\n")
    modes = sorted({r.mape_mode for r in reports})
    buf.write(f"\nMAPE mode: {', '.join(modes)}. Images: {', '.join(str(r.n_images) for r in reports)}.\n")
    return buf.getvalue()


def errors_csv(report: CountReport) -> str:
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(["image_id", "pred_pods", "gt_pods", "pod_error", "pred_seeds", "gt_seeds", "seed_error"])
    for o in report.per_image:
        w.writerow([o.image_id, o.pred_pods, o.gt_pods, o.pred_pods - o.gt_pods, o.pred_seeds, o.gt_seeds, o.pred_seeds - o.gt_seeds])
    return buf.getvalue()


def write_report(report: CountReport, out) -> dict[str, Path]:
    out = Path(out)
    out.mkdir(parents=True, exist_ok=True)
    paths = {"json": out / "report.json", "md": out / "report.md", "csv": out / "errors.csv"}
    with open(paths["json"], "w") as f:
        json.dump(report.to_dict(), f, indent=1, sort_keys=True)
    paths["md"].write_text(render_markdown([report]))
    paths["csv"].write_text(errors_csv(report))
    return paths
