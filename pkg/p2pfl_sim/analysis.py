"""
Metrics computed from completed runs.  Every metric reads only a
:class:`RunRecord` (plus, where needed, the true parameter or a test set), so
every headline number in a run summary can be recomputed from the record
table on disk.

Conventions
-----------
A :class:`RunRecord` holds one :class:`RunRow` per client per local cycle,
ordered by joint tick, then client id, then local cycle.  Local cycles count
from 1, joint ticks from 0.  Each row lists the neighbours whose messages were
considered (``received``) and those that were trusted (``accepted``); the
client itself is always considered.

Model quality is the clean-test mean squared error of a client's social
mean on noiseless test inputs.

Metrics
-------
* :func:`p2pfl_sim.analysis.mse_rate_fit`: log-log slope of a social variance
* :func:`p2pfl_sim.analysis.bias_vector_estimate`: normalized steady-state
  offset from the true parameter, with clean/biased verdicts
* :func:`p2pfl_sim.analysis.exclusion_events`: permanent exclusions of
  neighbours from confidence sets
* :func:`p2pfl_sim.analysis.attack_success`: trojan success rate, or benign
  clean-test MSE for the other attacks
"""

import collections
import dataclasses

import numpy as np

from . import util

EPS_CLEAN = 0.05
EPS_C = 0.02
FINAL_WINDOW = 50
MIN_FIT_ROWS = 10
# Trojan predictions this close to the target count as a success
TROJAN_TOLERANCE = 0.1

CLEAN = "clean"
BIASED = "biased"
UNDETERMINED = "undetermined"


@dataclasses.dataclass(frozen=True, eq=False)
class RunRow:
    """What one client looked like at the end of one local cycle."""

    client: int
    cycle: int
    tick: int
    social_mean: np.ndarray
    social_variances: np.ndarray
    social_error: float
    local_mean: np.ndarray
    local_variances: np.ndarray
    local_error: float
    received: tuple = ()
    accepted: tuple = ()
    overwritten: tuple = ()
    events: tuple = ()
    terminated: bool = False

    @property
    def social_trace(self):
        return float(np.sum(self.social_variances))

    @property
    def local_trace(self):
        return float(np.sum(self.local_variances))

    @property
    def order(self):
        return (self.tick, self.client, self.cycle)

    def same_as(self, other):
        """Bitwise equality of every field."""
        for field in dataclasses.fields(self):
            mine, theirs = getattr(self, field.name), getattr(other, field.name)
            if isinstance(mine, np.ndarray):
                if not np.array_equal(mine.view(np.uint64), np.asarray(theirs, dtype=float).view(np.uint64)):
                    return False
            elif mine != theirs and not (
                isinstance(mine, float) and np.isnan(mine) and np.isnan(theirs)
            ):
                return False
        return True


class RunRecord(object):
    """The rows of a run together with the client roster.

    Parameters
    ----------
    rows : iterable of RunRow
    dim : int
        Model dimension ``K``
    clients : iterable of int
        Every client id
    compromised : iterable of int
        Ids of the compromised clients
    """

    def __init__(self, rows, dim, clients, compromised=()):
        self.rows = sorted(rows, key=lambda row: row.order)
        self.dim = int(dim)
        self.clients = tuple(sorted(clients))
        self.compromised = tuple(sorted(compromised))

    @property
    def benign(self):
        return tuple(c for c in self.clients if c not in self.compromised)

    def __len__(self):
        return len(self.rows)

    def rows_for(self, client):
        return [row for row in self.rows if row.client == client]

    def final_rows(self):
        """Last row of every client that has one."""
        last = {}
        for row in self.rows:
            last[row.client] = row
        return last

    @property
    def final_cycle(self):
        return max((row.cycle for row in self.rows), default=0)


def validate(record, client=None):
    """Check that a record is usable for analysis.

    Raises
    ------
    AnalysisError
        If the record is empty or has no rows for ``client``.
    """
    if len(record) == 0:
        raise util.AnalysisError("run record has no rows")
    if client is not None and client not in record.clients:
        raise util.AnalysisError(
            f"client {client!r} is not part of the run; clients are {list(record.clients)}"
        )


@dataclasses.dataclass(frozen=True)
class RateFit:
    slope: float
    intercept: float
    r_squared: float


def fit_power_law(t, values):
    """Least-squares line through ``(log t, log values)``.

    Returns
    -------
    fit : RateFit
    """
    x, y = np.log(np.asarray(t, dtype=float)), np.log(np.asarray(values, dtype=float))
    slope, intercept = np.polyfit(x, y, 1)
    residual = np.sum((y - (slope * x + intercept)) ** 2)
    total = np.sum((y - y.mean()) ** 2)
    r_squared = 1.0 if total == 0 else 1.0 - residual / total
    return RateFit(float(slope), float(intercept), float(r_squared))


def mse_rate_fit(record, client, coordinate, t_range):
    """Fit the decay rate of one social variance.

    Ordinary least squares of ``log (social covariance)_kk`` against ``log t``
    over the rows with ``t_range[0] <= t <= t_range[1]``.

    Examples
    --------
    A slope of -1 means the variance decays like ``1/t``.

    Parameters
    ----------
    record : RunRecord
    client : int
    coordinate : int
        0-based coordinate ``k``
    t_range : tuple of int
        Inclusive local-cycle range

    Returns
    -------
    fit : RateFit

    Raises
    ------
    AnalysisError
        With fewer than 10 rows in range or a non-positive variance.
    """
    validate(record, client)
    if not 0 <= coordinate < record.dim:
        raise util.AnalysisError(f"coordinate {coordinate} outside 0..{record.dim - 1}")
    t_lo, t_hi = t_range
    rows = [r for r in record.rows_for(client) if t_lo <= r.cycle <= t_hi]
    if len(rows) < MIN_FIT_ROWS:
        raise util.AnalysisError(
            f"client {client} has {len(rows)} rows in cycles [{t_lo}, {t_hi}], "
            f"need at least {MIN_FIT_ROWS}"
        )
    t = np.array([r.cycle for r in rows], dtype=float)
    values = np.array([r.social_variances[coordinate] for r in rows])
    if not np.all(np.isfinite(values) & (values > 0)):
        raise util.AnalysisError(
            f"client {client} coordinate {coordinate} has non-positive variances in range"
        )
    return fit_power_law(t, values)


@dataclasses.dataclass(frozen=True)
class BiasEstimate:
    """Steady-state offset of one client, normalized by the attack bias."""

    c_hat: np.ndarray
    error_inf: float
    verdict: str


def bias_vector_estimate(record, theta_star, b, final_window=FINAL_WINDOW, eps_c=EPS_C,
                         eps_clean=EPS_CLEAN, coordinates=None):
    """Estimate each client's bias vector ``c`` in ``theta_star + c * b``.

    ``c_hat = (mean social estimate over the final window - theta_star) / b``.
    A client is ``'biased'`` when every compared entry of ``c_hat`` exceeds
    ``eps_c``, else ``'clean'`` when the compared entries of the averaged
    estimate are all within ``eps_clean`` of ``theta_star``, else
    ``'undetermined'``.

    Parameters
    ----------
    record : RunRecord
    theta_star : np.ndarray, shape=(K,)
    b : float
        Label bias of the attack; nonzero
    final_window : int > 0
        Number of final rows averaged per client
    eps_c : float
    eps_clean : float
    coordinates : iterable of int or None
        Coordinates the verdicts look at; all of them by default

    Returns
    -------
    estimates : collections.OrderedDict
        ``client -> BiasEstimate`` in client order

    Raises
    ------
    AnalysisError
        For ``b == 0`` or a client with fewer than ``final_window`` rows.
    """
    validate(record)
    if b == 0:
        raise util.AnalysisError("bias b must be nonzero")
    if final_window < 1:
        raise util.AnalysisError(f"final_window must be >= 1, got {final_window!r}")
    theta_star = util.validate_vector(theta_star, record.dim, name="theta_star")
    index = np.arange(record.dim) if coordinates is None else np.array(sorted(coordinates), dtype=int)
    estimates = collections.OrderedDict()
    for client in record.clients:
        rows = record.rows_for(client)
        if len(rows) < final_window:
            raise util.AnalysisError(
                f"client {client} has {len(rows)} rows, final window needs {final_window}"
            )
        with np.errstate(over="ignore", invalid="ignore"):
            average = np.mean([r.social_mean for r in rows[-final_window:]], axis=0)
            offset = average - theta_star
            c_hat = offset / b
            error_inf = float(np.max(np.abs(offset[index]))) if index.size else 0.0
        if index.size and np.all(c_hat[index] > eps_c):
            verdict = BIASED
        elif error_inf < eps_clean:
            verdict = CLEAN
        else:
            verdict = UNDETERMINED
        estimates[client] = BiasEstimate(c_hat, error_inf, verdict)
    return estimates


@dataclasses.dataclass(frozen=True)
class ExclusionEvent:
    """Confidence-set history of one observed neighbour at one observer."""

    first_tick: int
    first_cycle: int
    exclusion_count: int

    @property
    def permanent(self):
        return self.first_tick is not None


def exclusion_events(record):
    """Find when observers permanently stop trusting observed neighbours.

    For each pair, only the observer's rows in which the observed client's
    message was considered count.  The exclusion is permanent from the first
    excluding row after the last accepting row, provided that row exists.

    Parameters
    ----------
    record : RunRecord

    Returns
    -------
    events : collections.OrderedDict
        ``(observer, observed) -> ExclusionEvent``; ``first_tick`` and
        ``first_cycle`` are ``None`` when the exclusion is not permanent
    """
    history = collections.defaultdict(list)
    for row in sorted(record.rows, key=lambda r: r.order):
        accepted = set(row.accepted)
        for observed in row.received:
            if observed != row.client:
                history[(row.client, observed)].append((row.tick, row.cycle, observed in accepted))
    events = collections.OrderedDict()
    for pair in sorted(history):
        entries = history[pair]
        count = sum(1 for _, _, accepted in entries if not accepted)
        first_tick = first_cycle = None
        if not entries[-1][2]:
            position = len(entries) - 1
            while position > 0 and not entries[position - 1][2]:
                position -= 1
            first_tick, first_cycle = entries[position][0], entries[position][1]
        events[pair] = ExclusionEvent(first_tick, first_cycle, count)
    return events


def clean_mse(theta, features, labels):
    """Mean squared prediction error of ``theta`` on a test set."""
    with np.errstate(over="ignore", invalid="ignore"):
        error = float(np.mean((np.asarray(features) @ theta - labels) ** 2))
    return error if not np.isnan(error) else np.inf


def trojan_success(theta, features, spec):
    """Fraction of triggered test inputs predicted within tolerance of the target."""
    triggered = np.maximum(np.asarray(features) + spec.trigger, 0.0)
    with np.errstate(over="ignore", invalid="ignore"):
        hits = np.abs(triggered @ theta - spec.target) < TROJAN_TOLERANCE
    return float(np.mean(hits))


def attack_success(record, task, spec, test_set):
    """Score an attack against the benign clients' final social means.

    Parameters
    ----------
    record : RunRecord
    task : p2pfl_sim.belief.LinearTask
    spec : p2pfl_sim.adversary.AttackSpec or None
        ``None`` scores a benign run
    test_set : tuple of np.ndarray
        Clean ``(features, labels)``

    Returns
    -------
    score : float
        For a trojan, the triggered-success fraction averaged over benign
        clients; otherwise their mean clean-test MSE.

    Raises
    ------
    AnalysisError
        For an empty test set or a record without benign rows.
    """
    features, labels = test_set
    if len(labels) == 0:
        raise util.AnalysisError("test set is empty")
    util.validate_vector(task.theta_star, record.dim, name="theta_star")
    final = record.final_rows()
    benign = [c for c in record.benign if c in final]
    if not benign:
        raise util.AnalysisError("record has no benign client rows")
    if spec is not None and spec.kind == "trojan":
        scores = [trojan_success(final[c].social_mean, features, spec) for c in benign]
    else:
        scores = [clean_mse(final[c].social_mean, features, labels) for c in benign]
    return float(np.mean(scores))


def default_rate_range(record):
    """Cycle range used for the summary's rate fits."""
    final = record.final_cycle
    return (min(100, max(1, final // 2)), final)


def rate_slopes(record, supports, t_range=None):
    """Slope of every benign client's observed-coordinate variances.

    Returns
    -------
    slopes : collections.OrderedDict
        ``client -> {coordinate: slope}``
    """
    t_range = default_rate_range(record) if t_range is None else t_range
    slopes = collections.OrderedDict()
    for client in record.benign:
        slopes[client] = collections.OrderedDict(
            (k, mse_rate_fit(record, client, k, t_range).slope) for k in supports[client]
        )
    return slopes


def poisoned_coordinates(scenario):
    """Coordinates observed by at least one compromised client."""
    covered = set()
    for client in scenario.attacks:
        covered.update(scenario.task.support_sets[client])
    return tuple(sorted(covered))


def evaluate(record, scenario, test_set=None, **kwargs):
    """Compute every summary metric for a completed run.

    Examples
    --------
    >>> scenario = p2pfl_sim.presets.preset("p2p5-node4-labelflip")
    >>> record = p2pfl_sim.simulation.simulate(scenario)
    >>> summary = evaluate(record, scenario)

    Parameters
    ----------
    record : RunRecord
    scenario : p2pfl_sim.presets.Scenario
    test_set : tuple of np.ndarray or None
        Defaults to the scenario's seeded clean test set
    **kwargs
        Additional keyword arguments which will be passed to the
        appropriate metric or preprocessing functions.

    Returns
    -------
    scores : collections.OrderedDict
        Dictionary of scores, where the key is the metric name (str) and
        the value is plain JSON-compatible data.
    """
    validate(record)
    task = scenario.task
    if test_set is None:
        test_set = scenario.test_set()
    kwargs.setdefault("final_window", min(scenario.final_window, _min_rows(record)))
    kwargs.setdefault("eps_c", scenario.eps_c)
    kwargs.setdefault("eps_clean", scenario.eps_clean)
    scores = collections.OrderedDict()

    final = record.final_rows()
    scores["Final estimates"] = collections.OrderedDict(
        (str(c), final[c].social_mean.tolist()) for c in record.clients if c in final
    )
    scores["Clean test MSE"] = attack_success(record, task, None, test_set)

    bias = scenario.label_bias()
    coordinates = scenario.verdict_coordinates
    if coordinates is None and bias is not None:
        coordinates = poisoned_coordinates(scenario)
    kwargs.setdefault("coordinates", coordinates)
    estimates = util.filter_kwargs(
        bias_vector_estimate, record, task.theta_star, bias if bias is not None else 1.0, **kwargs
    )
    scores["Bias verdicts"] = collections.OrderedDict(
        (
            str(c),
            {"verdict": e.verdict, "c_hat": e.c_hat.tolist(), "error_inf": e.error_inf},
        )
        for c, e in estimates.items()
    )
    scores["Verdict coordinates"] = None if coordinates is None else list(coordinates)

    events = exclusion_events(record)
    scores["Exclusion events"] = [
        {
            "observer": observer,
            "observed": observed,
            "first_tick": event.first_tick,
            "first_cycle": event.first_cycle,
            "exclusions": event.exclusion_count,
        }
        for (observer, observed), event in events.items()
        if event.permanent
    ]

    scores["Attack success"] = collections.OrderedDict(
        (kind, attack_success(record, task, spec, test_set))
        for kind, spec in scenario.attack_kinds().items()
    )

    try:
        slopes = util.filter_kwargs(rate_slopes, record, task.support_sets, **kwargs)
        scores["MSE slopes"] = collections.OrderedDict(
            (str(c), {str(k): s for k, s in per.items()}) for c, per in slopes.items()
        )
    except util.AnalysisError:
        scores["MSE slopes"] = None
    return scores


def breach_summary(error, scenario):
    """Summary of a run aborted by an :class:`p2pfl_sim.util.InvariantBreach`.

    A benign client whose own beliefs go non-finite has an unbounded
    clean-test MSE, so under an algorithm other than SABRE with a model
    attack present the breach witnesses that the attack broke learning.

    Parameters
    ----------
    error : p2pfl_sim.util.InvariantBreach
        The breach, with the partial record attached as ``error.record``
    scenario : p2pfl_sim.presets.Scenario

    Returns
    -------
    scores : collections.OrderedDict
    """
    record = getattr(error, "record", None)
    model_attacks = sorted(k for k, spec in scenario.attack_kinds().items() if spec.poisons_model)
    scores = collections.OrderedDict()
    scores["Invariant breach"] = collections.OrderedDict(
        [("client", error.client), ("tick", error.tick), ("message", str(error))]
    )
    scores["Rows recorded"] = 0 if record is None else len(record)
    scores["Clean test MSE"] = float("inf")
    scores["Vulnerability witness"] = scenario.algorithm != "sabre" and bool(model_attacks)
    scores["Model attacks"] = model_attacks
    return scores


def _min_rows(record):
    counts = collections.Counter(row.client for row in record.rows)
    return max(1, min(counts.values()))


def guarantee_report(record, scenario, test_set=None, **kwargs):
    """Pass/fail checks for the learning and robustness guarantees.

    Returns
    -------
    report : collections.OrderedDict
        ``'benign clients clean'``: every benign client has a clean verdict;
        ``'attackers excluded'``: every benign client that heard an attacker
        excludes it permanently; ``'rate slopes'``: every fitted slope lies in
        ``slope_range``; plus the full :func:`evaluate` summary under
        ``'summary'``.
    """
    slope_range = kwargs.pop("slope_range", (-1.3, -0.7))
    summary = evaluate(record, scenario, test_set=test_set, **kwargs)
    benign = {str(c) for c in record.benign}
    report = collections.OrderedDict()
    report["benign clients clean"] = all(
        v["verdict"] == CLEAN for c, v in summary["Bias verdicts"].items() if c in benign
    )
    events = exclusion_events(record)
    heard = [
        (observer, observed)
        for (observer, observed) in events
        if observer in record.benign and observed in record.compromised
    ]
    report["attackers excluded"] = all(events[pair].permanent for pair in heard)
    slopes = summary["MSE slopes"]
    report["rate slopes"] = slopes is not None and all(
        slope_range[0] <= s <= slope_range[1] for per in slopes.values() for s in per.values()
    )
    report["summary"] = summary
    return report
