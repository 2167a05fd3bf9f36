"""Detection (FROC) and treatment-response evaluation."""

from __future__ import annotations

import csv
import io
import logging
from dataclasses import dataclass, field

import numpy as np
from scipy import ndimage

from .core import Volume
from .detect import EnsembleModel, member_posteriors, seeds_from_posteriors
from .grow import GrowConfig, Segmentation, grow

log = logging.getLogger(__name__)


@dataclass
class MatchResult:
    hits: set
    false_positives: list
    n_components: int


def match_detections(seeds, gt_tumor: Volume, max_distance_mm: float | None = None) -> MatchResult:
    """A ground-truth component is hit when at least one seed lies inside it
    (or, with ``max_distance_mm``, within that distance of it).  Seeds that
    hit nothing are false positives."""
    labels = np.asarray(gt_tumor.data).astype(np.int64)
    comp_ids = [int(c) for c in np.unique(labels) if c != 0]
    near = None
    if max_distance_mm is not None and comp_ids:
        # nearest component label for every voxel, with its distance
        dist, idx = ndimage.distance_transform_edt(labels == 0, sampling=gt_tumor.spacing_mm,
                                                   return_indices=True)
        near = (dist, labels[tuple(idx)])
    hits, fps = set(), []
    for s in seeds:
        c = s.coord.as_tuple()
        if not all(0 <= v < n for v, n in zip(c, labels.shape)):
            raise ValueError(f"seed {c} outside ground-truth grid {labels.shape}")
        lab = int(labels[c])
        if lab == 0 and near is not None and near[0][c] <= max_distance_mm:
            lab = int(near[1][c])
        if lab:
            hits.add(lab)
        else:
            fps.append(s)
    return MatchResult(hits, fps, len(comp_ids))


@dataclass
class FrocPoint:
    tau: float
    sensitivity: float
    fp_per_case: float
    hits: int
    false_positives: int


@dataclass
class FrocCurve:
    points: list
    n_cases: int
    n_tumors: int

    def at(self, tau: float) -> FrocPoint:
        for p in self.points:
            if abs(p.tau - tau) < 1e-12:
                return p
        raise KeyError(tau)

    def to_csv(self) -> str:
        buf = io.StringIO()
        w = csv.writer(buf, lineterminator="\n")
        w.writerow(["tau", "sensitivity", "fp_per_case"])
        for p in self.points:
            w.writerow([repr(float(p.tau)), repr(float(p.sensitivity)), repr(float(p.fp_per_case))])
        return buf.getvalue()

    def to_dict(self) -> dict:
        return {"n_cases": self.n_cases, "n_tumors": self.n_tumors,
                "points": [vars(p).copy() for p in self.points]}


def froc_from_posteriors(case_posteriors, gt_tumors, taus, rule: str = "majority",
                         min_separation_mm: float = 5.0, max_distance_mm: float | None = None) -> FrocCurve:
    """FROC points from precomputed member posteriors (one list per case)."""
    if len(case_posteriors) != len(gt_tumors):
        raise ValueError("need one ground truth per case")
    taus = sorted({float(t) for t in taus}, reverse=True)
    n_cases = len(gt_tumors)
    n_tumors = sum(len([c for c in np.unique(g.data) if c != 0]) for g in gt_tumors)
    points = []
    for tau in taus:
        hits = fps = 0
        for posts, gt in zip(case_posteriors, gt_tumors):
            res = seeds_from_posteriors(posts, tau, rule, min_separation_mm)
            m = match_detections(res.seeds, gt, max_distance_mm)
            hits += len(m.hits)
            fps += len(m.false_positives)
        sens = hits / n_tumors if n_tumors else 0.0
        points.append(FrocPoint(tau, sens, fps / n_cases if n_cases else 0.0, hits, fps))
    return FrocCurve(points, n_cases, n_tumors)


def froc(model: EnsembleModel, cases, taus, min_separation_mm: float = 5.0,
         max_distance_mm: float | None = None, threads: int = 1) -> FrocCurve:
    """FROC of an ensemble over cases with ground truth.  ``cases`` yields
    (channels, breast_mask, gt_tumor) triples."""
    posts, gts = [], []
    for channels, mask, gt in cases:
        if gt is None:
            raise ValueError("every case needs a ground-truth tumor map")
        posts.append(member_posteriors(model, channels, mask, threads))
        gts.append(gt)
    return froc_from_posteriors(posts, gts, taus, model.rule, min_separation_mm, max_distance_mm)


def volume_change(v_pre: float, v_during: float) -> float:
    """Percent change 100 (v_during - v_pre) / v_pre."""
    if not v_pre > 0:
        raise ValueError(f"pre-treatment volume must be positive, got {v_pre}")
    return 100.0 * (v_during - v_pre) / v_pre


@dataclass(frozen=True)
class CohortStats:
    median: float
    q1: float
    q3: float
    n: int

    def formatted(self) -> str:
        return f"median {self.median:.1f}% (IQR {self.q1:.1f}% to {self.q3:.1f}%, n={self.n})"

    def to_dict(self) -> dict:
        return {"median": self.median, "q1": self.q1, "q3": self.q3, "n": self.n,
                "formatted": self.formatted()}


def cohort_stats(changes) -> CohortStats:
    """Median and quartiles with linear interpolation between order statistics."""
    x = np.asarray(list(changes), float)
    if x.size == 0:
        raise ValueError("no volume changes to summarize")
    q1, med, q3 = np.quantile(x, [0.25, 0.5, 0.75], method="linear")
    return CohortStats(float(med), float(q1), float(q3), int(x.size))


@dataclass
class LesionPair:
    pre: Segmentation
    during: Segmentation
    percent_change: float | None
    carried_forward: bool = False
    gt_component: int | None = None

    def to_dict(self) -> dict:
        return {"pre_seed": self.pre.seed.to_dict(), "during_seed": self.during.seed.to_dict(),
                "pre_volume_mm3": self.pre.volume_mm3, "during_volume_mm3": self.during.volume_mm3,
                "percent_change": self.percent_change, "carried_forward": self.carried_forward,
                "gt_component": self.gt_component}


@dataclass
class CaseResponse:
    case_id: str
    pairs: list
    primary: int | None          # index into pairs
    reference_change: float | None = None
    warnings: list = field(default_factory=list)

    @property
    def percent_change(self) -> float | None:
        return None if self.primary is None else self.pairs[self.primary].percent_change

    def to_dict(self) -> dict:
        return {"case_id": self.case_id, "pairs": [p.to_dict() for p in self.pairs],
                "primary": self.primary, "percent_change": self.percent_change,
                "reference_change": self.reference_change, "warnings": list(self.warnings)}


@dataclass
class ResponseReport:
    cases: list
    stats: CohortStats | None
    warnings: list = field(default_factory=list)

    def to_dict(self) -> dict:
        out = {"cases": [c.to_dict() for c in self.cases],
               "cohort": self.stats.to_dict() if self.stats else None,
               "warnings": list(self.warnings)}
        refs = [c.reference_change for c in self.cases if c.reference_change is not None]
        if refs and len(refs) == len(self.cases):
            errs = [c.percent_change - c.reference_change for c in self.cases
                    if c.percent_change is not None]
            out["reference"] = {"cohort": cohort_stats(refs).to_dict(),
                                "max_abs_error_pp": max((abs(e) for e in errs), default=None)}
        return out


def _unique_regions(segs):
    """Drop failed growths and regions identical to an earlier one (several
    seeds in one lesion grow to the same region)."""
    out = []
    for s in segs:
        if s.failed:
            continue
        if any(np.array_equal(s.mask.data, o.mask.data) for o in out):
            continue
        out.append(s)
    return out


def _grow_all(washin: Volume, mask: Volume, seeds, cfg: GrowConfig):
    return [grow(washin, mask, s, cfg) for s in seeds]


def _jaccard(a: np.ndarray, b: np.ndarray) -> float:
    inter = np.count_nonzero(a & b)
    return inter / np.count_nonzero(a | b) if inter else 0.0


def pair_lesions(pre_segs, during_segs, during_washin: Volume, during_mask: Volume,
                 cfg: GrowConfig) -> list:
    """Pair every pre-treatment region with the during-treatment region of
    highest Jaccard index.  Without an overlapping one, the pre-treatment seed
    is carried forward and grown on the during-treatment map.

    Jaccard rather than raw overlap keeps a leaked region that swallows the
    whole lesion from outranking the lesion's own follow-up region."""
    pairs = []
    for p in _unique_regions(pre_segs):
        pm = p.mask.data > 0
        best, best_j = None, 0.0
        for d in during_segs:
            if d.failed:
                continue
            j = _jaccard(pm, d.mask.data > 0)
            if j > best_j:
                best, best_j = d, j
        carried = best is None
        if carried:
            best = grow(during_washin, during_mask, p.seed, cfg)
        change = volume_change(p.volume_mm3, best.volume_mm3)
        pairs.append(LesionPair(p, best, change, carried))
    return pairs


def case_response(pre_seeds, during_seeds, pre_washin: Volume, pre_mask: Volume,
                  during_washin: Volume, during_mask: Volume, cfg: GrowConfig = GrowConfig(),
                  case_id: str = "", gt_tumor: Volume | None = None,
                  reference_change: float | None = None) -> CaseResponse:
    """Grow every seed at both time points and pair the lesions.

    The primary pair is the one whose pre-treatment region has the highest
    Jaccard index with the ground-truth tumor when one is given.  Otherwise
    it is the pair whose pre-treatment seed lies deepest inside its consensus
    component, ties broken by mean posterior.
    """
    warnings = []
    pre_segs = _grow_all(pre_washin, pre_mask, pre_seeds, cfg)
    during_segs = _grow_all(during_washin, during_mask, during_seeds, cfg)
    n_failed = sum(s.failed for s in pre_segs)
    if n_failed:
        warnings.append(f"{n_failed} of {len(pre_segs)} pre-treatment growths failed")
    pairs = pair_lesions(pre_segs, during_segs, during_washin, during_mask, cfg)
    if not pairs:
        warnings.append("no pre-treatment lesion could be segmented; case excluded")
        return CaseResponse(case_id, [], None, reference_change, warnings)

    def confidence(i):
        s = pairs[i].pre.seed
        depth = getattr(s, "edt_depth_mm", 0.0)
        post = getattr(s, "mean_posterior", 0.0)
        return (depth, post, -i)

    primary = max(range(len(pairs)), key=confidence)
    if gt_tumor is not None:
        gt = np.asarray(gt_tumor.data)
        scores = []
        for p in pairs:
            pm = p.pre.mask.data > 0
            labs = gt[pm]
            labs = labs[labs > 0]
            if labs.size:
                p.gt_component = int(np.bincount(labs).argmax())
                scores.append(_jaccard(pm, gt == p.gt_component))
            else:
                scores.append(0.0)
        if max(scores) > 0:
            primary = int(np.argmax(scores))
        else:
            warnings.append("no segmented lesion overlaps the ground-truth tumor")
    return CaseResponse(case_id, pairs, primary, reference_change, warnings)


def response_report(case_responses) -> ResponseReport:
    changes, warnings = [], []
    for c in case_responses:
        if c.percent_change is None:
            warnings.append(f"{c.case_id}: excluded from cohort statistics")
        else:
            changes.append(c.percent_change)
    stats = cohort_stats(changes) if changes else None
    return ResponseReport(list(case_responses), stats, warnings)


def cube_law_change(shrink_factor: float) -> float:
    """Percent volume change when every semi-axis is scaled by ``shrink_factor``."""
    return 100.0 * (shrink_factor ** 3 - 1.0)
