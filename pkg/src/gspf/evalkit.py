"""Detection metrics and the Monte-Carlo success-rate harness."""

from __future__ import annotations

import csv
import io
import logging
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass, field, replace
from typing import Callable, Iterable, Optional, Sequence

from .core import ChangePointSet, DataError, DetectorConfig, GspfError
from .simlab import SimulationSpec, generate

log = logging.getLogger(__name__)

DEFAULT_ALPHAS = (0.05, 0.01, 0.005, 0.001, 0.0005, 0.0001, 0.00005, 0.00001)


@dataclass(frozen=True)
class EvalMetrics:
    annotation_error: int
    hausdorff_error: float
    success: bool

    def to_dict(self) -> dict:
        return {
            "annotation_error": self.annotation_error,
            "hausdorff_error": self.hausdorff_error,
            "success": self.success,
        }


def _as_set(points) -> ChangePointSet:
    return points if isinstance(points, ChangePointSet) else ChangePointSet(tuple(points))


def annotation_error(est, truth) -> int:
    """Absolute difference of the two cardinalities."""
    return abs(len(_as_set(est)) - len(_as_set(truth)))


def hausdorff_error(est, truth) -> float:
    """Directed distance ``max_b min_a |b - a|`` over truth points ``b``.

    One set empty and the other not gives 1; both empty gives 0.
    """
    a, b = _as_set(est).indices, _as_set(truth).indices
    if not a and not b:
        return 0.0
    if not a or not b:
        return 1.0
    return float(max(min(abs(bi - ai) for ai in a) for bi in b))


def evaluate(est, truth) -> EvalMetrics:
    da = annotation_error(est, truth)
    dh = hausdorff_error(est, truth)
    return EvalMetrics(da, dh, da == 0 and dh == 0.0)


@dataclass(frozen=True)
class BenchResult:
    """Success rates of one (family, scenario) cell over a list of FDR levels."""

    family: str
    scenario: int
    alphas: tuple
    success_rates: tuple
    n_replications: int
    failures: tuple = field(default=(), repr=False)

    def rate(self, alpha: float) -> float:
        return self.success_rates[self.alphas.index(alpha)]


def _gspf_detector(config: DetectorConfig) -> Callable:
    from .pipeline import detect

    def run(seq):
        return detect(seq, config)

    return run


def _change_points(outcome, alpha: float) -> ChangePointSet:
    if hasattr(outcome, "change_points_at"):
        return outcome.change_points_at(alpha)
    if callable(outcome):
        return _as_set(outcome(alpha))
    return _as_set(outcome)


def _replicate(args) -> tuple:
    spec, config, alphas, detector = args
    try:
        data = generate(spec)
        run = detector if detector is not None else _gspf_detector(config)
        outcome = run(data.seq)
        hits = tuple(evaluate(_change_points(outcome, a), data.truth).success for a in alphas)
        return hits, None
    except (GspfError, ArithmeticError, ValueError, MemoryError) as exc:
        return tuple(False for _ in alphas), f"seed {spec.seed}: {type(exc).__name__}: {exc}"


def run_bench(
    spec_template: SimulationSpec,
    n_replications: int,
    detector_config: DetectorConfig = DetectorConfig(),
    alphas: Sequence[float] = DEFAULT_ALPHAS,
    detector: Optional[Callable] = None,
    workers: int = 1,
) -> BenchResult:
    """Success rate per FDR level over ``n_replications`` simulated datasets.

    Replication ``i`` uses seed ``spec_template.seed + i``. The detector runs
    once per dataset; its outcome is re-thresholded at every level when it
    offers ``change_points_at`` (a ``Detection`` does). ``detector`` maps a
    sequence to a ``Detection``, a change-point set, or a callable of alpha;
    it defaults to the full two-stage detector with ``detector_config``.
    Replications that raise count as failures and are logged.
    """
    if n_replications < 1:
        raise DataError("n_replications must be at least 1")
    alphas = tuple(float(a) for a in alphas)
    if not alphas:
        raise DataError("need at least one alpha")
    jobs = [(replace(spec_template, seed=spec_template.seed + i), detector_config, alphas, detector) for i in range(n_replications)]
    if workers > 1 and detector is None:
        with ProcessPoolExecutor(max_workers=workers) as pool:
            outcomes = list(pool.map(_replicate, jobs))
    else:
        outcomes = [_replicate(job) for job in jobs]
    counts = [0] * len(alphas)
    failures = []
    for hits, reason in outcomes:
        for i, hit in enumerate(hits):
            counts[i] += int(hit)
        if reason is not None:
            log.warning("replication failed: %s", reason)
            failures.append(reason)
    rates = tuple(c / n_replications for c in counts)
    return BenchResult(spec_template.family, spec_template.scenario, alphas, rates, n_replications, tuple(failures))


def bench_table_csv(results: Iterable[BenchResult]) -> str:
    """CSV with one row per alpha and one success-rate column per family.

    All results must share the scenario and the alpha list.
    """
    results = list(results)
    if not results:
        raise DataError("no benchmark results to tabulate")
    alphas = results[0].alphas
    if any(r.alphas != alphas for r in results):
        raise DataError("benchmark results use different alpha lists")
    if len({r.scenario for r in results}) != 1:
        raise DataError("benchmark results mix scenarios")
    buf = io.StringIO()
    writer = csv.writer(buf, lineterminator="\n")
    writer.writerow(["alpha"] + [r.family for r in results])
    for i, a in enumerate(alphas):
        writer.writerow([f"{a:.17g}"] + [f"{r.success_rates[i]:.17g}" for r in results])
    return buf.getvalue()
