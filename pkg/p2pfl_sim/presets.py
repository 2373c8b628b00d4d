"""
Named, version-pinned scenarios and the standing-assumption checks that go
with them.

Conventions
-----------
Preset names:

* ``p2p5-benign``, ``p2p5-node4-labelflip``, ``p2p5-majority-compromised``,
  ``p2p5-bayp2pfl-labelflip``: five clients learning
  ``theta_star = [-0.7179, 1.3171, -0.6441]`` with supports ``{1}``,
  ``{1, 2}``, ``{1, 2, 3}``, ``{2, 3}``, ``{3}`` (here 0-based) on the ring
  1-2-3-4-5-1 plus the chord 2-4;
* ``p2p5-line-node4-labelflip``: the same attack on the line 1-2-3-4-5, which
  cuts client 5 off from the other benign clients (tagged expected-fail);
* ``n50-<attack>-<count>[-s<size>][-<placement>]``: 50 clients on a complete
  graph learning ``K = 20`` coordinates, ``count`` of them compromised.
  ``attack`` is one of ``labelflip``, ``trojan``, ``bitflip``,
  ``generalrandom`` or ``alie``.  ``-s<size>`` gives every client a random
  support of that size instead of all coordinates (tagged expected-fail,
  since the all-coordinate confidence test then rejects uninformed
  neighbours).  ``<placement>`` is ``best``, ``worst`` or ``random`` and
  picks the compromised clients by dataset quality.  ALIE attackers deviate
  by the largest z that still hides among the benign clients;
* ``graph-drop20``: ``n50-labelflip-10`` with 20% of the directed edges
  dropped;
* ``graph-timevarying``: as ``graph-drop20`` with the dropped edges redrawn
  every 100 ticks.

Operations
----------
* :func:`p2pfl_sim.presets.preset`: build a named scenario
* :func:`p2pfl_sim.presets.check_assumptions`: sufficiency, benign relaxed
  connectivity and joint learning
"""

import collections
import dataclasses
import re

import numpy as np

from . import adversary
from . import aggregation
from . import analysis
from . import belief as belief_module
from . import learning
from . import network
from . import util

PRESET_VERSION = "3"

ALGORITHMS = ("sabre", "bayp2pfl", "trimmed-mean", "clipping", "zeno")

SIGMA_THRESHOLD = 1e-6
T_MAX = 8000
BATCH_SIZE = 5
VALIDATION_SIZE = 20
TEST_SIZE = 200
CONNECTIVITY_HORIZON = 1000

P2P5_THETA = (-0.7179, 1.3171, -0.6441)
P2P5_SUPPORTS = {1: (0,), 2: (0, 1), 3: (0, 1, 2), 4: (1, 2), 5: (2,)}
P2P5_CHORDS = ((2, 4),)
P2P5_T_MAX = 2000
# The only coordinate observed by both benign clients of the majority preset
MAJORITY_VERDICT_COORDINATES = (1,)

SWEEP_CLIENTS = 50
SWEEP_DIM = 20
SWEEP_T_MAX = 1000
# Seed of the sweep family's true parameter
SWEEP_THETA_SEED = 20
RANKING_CYCLES = 200
TROJAN_TRIGGER_COORDINATES = (0, 1)

SWEEP_ATTACKS = {
    "labelflip": "label-flip-bias",
    "trojan": "trojan",
    "bitflip": "bit-flip",
    "generalrandom": "general-random",
    "alie": "a-little-is-enough",
}
PLACEMENTS = ("best", "worst", "random")

SWEEP_PATTERN = re.compile(
    r"^n50-(?P<attack>[a-z]+)-(?P<count>\d+)(?:-s(?P<size>\d+))?(?:-(?P<placement>[a-z]+))?$"
)


def _int_keys(mapping, name):
    try:
        return {int(k): v for k, v in mapping.items()}
    except (TypeError, ValueError):
        raise util.ConfigurationError(f"{name} keys must be client ids")


def task_to_dict(task):
    return collections.OrderedDict(
        [
            ("theta_star", task.theta_star.tolist()),
            ("noise_variance", {str(c): v for c, v in task.noise_variance.items()}),
            ("support_sets", {str(c): list(s) for c, s in task.support_sets.items()}),
            ("feature_mode", task.feature_mode),
        ]
    )


def task_from_dict(data):
    known = {"theta_star", "noise_variance", "support_sets", "feature_mode"}
    unknown = sorted(set(data) - known)
    if unknown:
        raise util.ConfigurationError(f"unknown task field(s): {', '.join(unknown)}")
    missing = sorted({"theta_star", "noise_variance", "support_sets"} - set(data))
    if missing:
        raise util.ConfigurationError(f"missing task field(s): {', '.join(missing)}")
    return belief_module.LinearTask(
        np.asarray(data["theta_star"], dtype=float),
        _int_keys(data["noise_variance"], "noise_variance"),
        _int_keys(data["support_sets"], "support_sets"),
        data.get("feature_mode", "single"),
    )


@dataclasses.dataclass(frozen=True, eq=False)
class Scenario:
    """Everything needed to reproduce a run.

    Parameters
    ----------
    name : str
    task : p2pfl_sim.belief.LinearTask
    topology : p2pfl_sim.network.Topology
    algorithm : str
        One of :data:`ALGORITHMS`; ``'bayp2pfl'`` is fixed uniform trust
    attacks : dict
        ``client -> AttackSpec`` for the compromised clients
    cycle_lengths : dict
        ``client -> local cycle length``; 1 when omitted
    phases : dict or None
        ``client -> clock phase``
    kappa : float
        Confidence band width
    sigma_threshold : float
        Social covariance trace at which a client stops
    t_max : int
        Maximum number of local cycles
    seed : int
        Master seed
    trim, zeno_drop : int or None
        Baseline parameters; ``None`` uses the number of compromised clients
    clip_tau : float or None
        Clipping threshold; ``None`` uses the median deviation norm
    freeze_patience : int or None
        Enables local-model freezing
    message_ttl : int or None
        Ticks a received message stays usable; ``None`` keeps it until
        replaced
    verdict_coordinates : tuple of int or None
        Coordinates the summary's bias verdicts are judged on; ``None`` uses
        the coordinates the compromised clients observe
    expected_fail : bool
        Marks scenarios built to violate a standing assumption
    """

    name: str
    task: belief_module.LinearTask
    topology: network.Topology
    algorithm: str = "sabre"
    attacks: dict = dataclasses.field(default_factory=dict)
    cycle_lengths: dict = dataclasses.field(default_factory=dict)
    phases: dict = None
    kappa: float = aggregation.KAPPA
    sigma_threshold: float = SIGMA_THRESHOLD
    t_max: int = T_MAX
    seed: int = 0
    batch_size: int = BATCH_SIZE
    prior_variance: float = belief_module.PRIOR_VARIANCE
    diagonal: bool = True
    trim: int = None
    clip_tau: float = None
    zeno_drop: int = None
    zeno_rho: float = aggregation.ZENO_RHO
    validation_size: int = VALIDATION_SIZE
    test_size: int = TEST_SIZE
    freeze_patience: int = None
    message_ttl: int = None
    eps_clean: float = analysis.EPS_CLEAN
    eps_c: float = analysis.EPS_C
    final_window: int = analysis.FINAL_WINDOW
    verdict_coordinates: tuple = None
    expected_fail: bool = False
    version: str = PRESET_VERSION

    def validate(self):
        """Check the scenario for internal consistency.

        Raises
        ------
        ConfigurationError
            Naming the offending field.
        """
        clients = set(self.task.clients)
        if set(self.topology.nodes) != clients:
            raise util.ConfigurationError("scenario.topology nodes must equal the task's clients")
        if self.algorithm not in ALGORITHMS:
            raise util.ConfigurationError(
                f"scenario.algorithm={self.algorithm!r} must be one of {ALGORITHMS}"
            )
        extra = sorted(set(self.attacks) - clients)
        if extra:
            raise util.ConfigurationError(f"scenario.attacks names unknown clients {extra}")
        for spec in self.attacks.values():
            spec.check_dimension(self.task.dim)
        extra = sorted(set(self.cycle_lengths) - clients)
        if extra:
            raise util.ConfigurationError(f"scenario.cycle_lengths names unknown clients {extra}")
        for client, variance in self.task.noise_variance.items():
            if not variance > 0:
                raise util.ConfigurationError(
                    f"scenario.task.noise_variance.{client} must be > 0 to learn from"
                )
        aggregation.ConfidenceParams(self.kappa)
        for name in ("t_max", "batch_size", "validation_size", "test_size", "final_window"):
            value = getattr(self, name)
            if int(value) != value or value < 1:
                raise util.ConfigurationError(f"scenario.{name} must be a positive integer")
        for name in ("trim", "zeno_drop", "freeze_patience", "message_ttl"):
            value = getattr(self, name)
            lowest = 0 if name in ("trim", "zeno_drop") else 1
            if value is not None and (int(value) != value or value < lowest):
                raise util.ConfigurationError(f"scenario.{name} must be an integer >= {lowest}")
        if self.diagonal and self.task.feature_mode != "single":
            raise util.ConfigurationError(
                f"scenario.diagonal requires single-coordinate features, "
                f"got task.feature_mode={self.task.feature_mode!r}"
            )
        if not self.prior_variance > 0:
            raise util.ConfigurationError("scenario.prior_variance must be > 0")
        if self.sigma_threshold < 0:
            raise util.ConfigurationError("scenario.sigma_threshold must be >= 0")
        if self.clip_tau is not None and not self.clip_tau > 0:
            raise util.ConfigurationError("scenario.clip_tau must be > 0")
        if self.verdict_coordinates is not None:
            coordinates = list(self.verdict_coordinates)
            if not coordinates or min(coordinates) < 0 or max(coordinates) >= self.task.dim:
                raise util.ConfigurationError(
                    f"scenario.verdict_coordinates must be a nonempty subset of "
                    f"0..{self.task.dim - 1}"
                )
        return self

    @property
    def compromised(self):
        return tuple(sorted(self.attacks))

    @property
    def benign(self):
        return tuple(c for c in self.task.clients if c not in self.attacks)

    def resolved_trim(self):
        return len(self.attacks) if self.trim is None else int(self.trim)

    def resolved_zeno_drop(self):
        return len(self.attacks) if self.zeno_drop is None else int(self.zeno_drop)

    def label_bias(self):
        """The shared label bias of the label-flip attackers, if any."""
        for client in self.compromised:
            if self.attacks[client].kind == "label-flip-bias":
                return self.attacks[client].bias
        return None

    def attack_kinds(self):
        """``kind -> AttackSpec`` of the first attacker of each kind."""
        kinds = collections.OrderedDict()
        for client in self.compromised:
            kinds.setdefault(self.attacks[client].kind, self.attacks[client])
        return kinds

    def test_set(self):
        """The scenario's seeded clean test set."""
        rng = np.random.default_rng(util.derive_seed(self.seed, util.TEST_STREAM, 0))
        return self.task.sample_test_set(self.test_size, rng)

    def replace(self, **changes):
        return dataclasses.replace(self, **changes)

    def to_dict(self):
        """Plain-data form with every default materialized."""
        data = collections.OrderedDict()
        for field in dataclasses.fields(self):
            value = getattr(self, field.name)
            if field.name == "task":
                value = task_to_dict(value)
            elif field.name == "topology":
                value = value.to_dict()
            elif field.name == "attacks":
                value = {str(c): value[c].to_dict() for c in sorted(value)}
            elif field.name in ("cycle_lengths", "phases") and value is not None:
                value = {str(c): value[c] for c in sorted(value)}
            elif field.name == "verdict_coordinates" and value is not None:
                value = [int(k) for k in value]
            data[field.name] = value
        return data

    @classmethod
    def from_dict(cls, data):
        """Inverse of :meth:`to_dict`; unknown keys are errors."""
        fields = {field.name for field in dataclasses.fields(cls)}
        unknown = sorted(set(data) - fields)
        if unknown:
            raise util.ConfigurationError(
                "unknown scenario field(s): " + ", ".join(f"scenario.{k}" for k in unknown)
            )
        missing = sorted({"name", "task", "topology"} - set(data))
        if missing:
            raise util.ConfigurationError(
                "missing scenario field(s): " + ", ".join(f"scenario.{k}" for k in missing)
            )
        values = dict(data)
        values["task"] = task_from_dict(data["task"])
        values["topology"] = network.Topology.from_dict(values["task"].clients, data["topology"])
        values["attacks"] = {
            c: adversary.AttackSpec.from_dict(spec)
            for c, spec in _int_keys(data.get("attacks", {}), "attacks").items()
        }
        values["cycle_lengths"] = _int_keys(data.get("cycle_lengths", {}), "cycle_lengths")
        if data.get("phases") is not None:
            values["phases"] = _int_keys(data["phases"], "phases")
        if data.get("verdict_coordinates") is not None:
            values["verdict_coordinates"] = tuple(int(k) for k in data["verdict_coordinates"])
        return cls(**values).validate()


def p2p5_task():
    return belief_module.LinearTask(
        np.array(P2P5_THETA),
        {c: belief_module.NOISE_VARIANCE for c in P2P5_SUPPORTS},
        dict(P2P5_SUPPORTS),
    )


def p2p5_scenario(name, attacked=(), algorithm="sabre", shape="ring", expected_fail=False):
    """Five-client scenario with label-flip attackers ``attacked``."""
    nodes = sorted(P2P5_SUPPORTS)
    chords = P2P5_CHORDS if shape == "ring" else ()
    return Scenario(
        name=name,
        task=p2p5_task(),
        topology=network.Topology(nodes, shape=shape, chords=chords),
        algorithm=algorithm,
        attacks={c: adversary.AttackSpec("label-flip-bias") for c in attacked},
        t_max=P2P5_T_MAX,
        expected_fail=expected_fail,
    )


def sweep_theta(dim=SWEEP_DIM):
    rng = np.random.default_rng(util.derive_seed(SWEEP_THETA_SEED, util.PLACEMENT_STREAM))
    return rng.standard_normal(dim)


def sweep_attack(kind, dim, clients=SWEEP_CLIENTS, count=0):
    """Attack spec shared by the compromised clients of a sweep run.

    ALIE uses :func:`p2pfl_sim.adversary.alie_supremum_z` for the population
    when it has one.
    """
    if kind == "a-little-is-enough" and count:
        try:
            return adversary.AttackSpec(kind, z=adversary.alie_supremum_z(clients, count))
        except util.ConfigurationError:
            return adversary.AttackSpec(kind)
    if kind == "trojan":
        trigger = np.zeros(dim)
        trigger[list(TROJAN_TRIGGER_COORDINATES)] = 1.0
        return adversary.AttackSpec("trojan", trigger=trigger)
    return adversary.AttackSpec(kind)


def solo_local_error(task, client, cycles, batch_size=BATCH_SIZE, seed=0,
                     prior_variance=belief_module.PRIOR_VARIANCE, diagonal=True):
    """Squared error of a client's local belief after learning alone.

    Uses the same data stream as :func:`p2pfl_sim.simulation.simulate`, so it
    measures the quality of the client's own dataset.
    """
    rng = util.spawn_streams(seed, [client], util.DATA_STREAM)[client]
    local = belief_module.GaussianBelief.prior(task.dim, prior_variance, diagonal=diagonal)
    for _ in range(cycles):
        features, labels = belief_module.sample_batch(task, client, batch_size, rng)
        local = learning.update_batch(local, features, labels, task.noise_variance[client])
    return float(np.sum((local.mean - task.theta_star) ** 2))


def place_attackers(task, count, placement, seed=0, cycles=RANKING_CYCLES):
    """Choose ``count`` compromised clients.

    ``None`` takes the lowest ids; ``'best'`` / ``'worst'`` take the clients
    whose solo local error is lowest / highest; ``'random'`` draws them from a
    seeded stream.
    """
    clients = list(task.clients)
    if placement is None:
        return tuple(clients[:count])
    if placement == "random":
        rng = np.random.default_rng(util.derive_seed(seed, util.PLACEMENT_STREAM, 0))
        return tuple(sorted(int(c) for c in rng.choice(clients, size=count, replace=False)))
    if placement not in PLACEMENTS:
        raise util.ConfigurationError(f"unknown placement {placement!r}; expected one of {PLACEMENTS}")
    errors = {c: solo_local_error(task, c, cycles, seed=seed) for c in clients}
    ranked = sorted(clients, key=lambda c: (errors[c], c))
    if placement == "worst":
        ranked = ranked[::-1]
    return tuple(sorted(ranked[:count]))


def sweep_scenario(attack, count, clients=SWEEP_CLIENTS, size=None, placement=None, name=None,
                   seed=0, t_max=SWEEP_T_MAX):
    """A complete-graph scenario from the sweep family.

    Parameters
    ----------
    attack : str
        Short attack name, a key of :data:`SWEEP_ATTACKS`
    count : int
        Number of compromised clients, ``0 <= count < clients``
    clients : int
        Number of clients
    size : int or None
        Random support size; ``None`` gives every client all coordinates
    placement : str or None
        Attacker placement by dataset quality
    """
    if attack not in SWEEP_ATTACKS:
        raise util.ConfigurationError(
            f"unknown sweep attack {attack!r}; expected one of {sorted(SWEEP_ATTACKS)}"
        )
    if not 0 <= count < clients:
        raise util.ConfigurationError(f"attacker count must lie in [0, {clients - 1}], got {count}")
    if size is not None and not 1 <= size <= SWEEP_DIM:
        raise util.ConfigurationError(f"support size must lie in [1, {SWEEP_DIM}], got {size}")
    ids = list(range(1, clients + 1))
    if size is None:
        supports = {c: tuple(range(SWEEP_DIM)) for c in ids}
    else:
        supports = {}
        for c in ids:
            rng = np.random.default_rng(util.derive_seed(seed, util.PLACEMENT_STREAM, 1, c))
            supports[c] = tuple(sorted(int(k) for k in rng.choice(SWEEP_DIM, size=size, replace=False)))
    if placement is None:
        noise = {c: belief_module.NOISE_VARIANCE for c in ids}
    else:
        rng = np.random.default_rng(util.derive_seed(seed, util.PLACEMENT_STREAM, 2))
        scales = 10.0 ** rng.uniform(-1.0, 1.0, size=clients)
        noise = {c: float(belief_module.NOISE_VARIANCE * s) for c, s in zip(ids, scales)}
    task = belief_module.LinearTask(sweep_theta(), noise, supports)
    attacked = place_attackers(task, count, placement, seed=seed)
    spec = sweep_attack(SWEEP_ATTACKS[attack], SWEEP_DIM, clients, count)
    return Scenario(
        name=name or f"n{clients}-{attack}-{count}",
        task=task,
        topology=network.Topology(ids, shape="complete", seed=seed),
        attacks={c: spec for c in attacked},
        t_max=t_max,
        seed=seed,
        expected_fail=size is not None,
    )


_FIXED = collections.OrderedDict(
    [
        ("p2p5-benign", lambda: p2p5_scenario("p2p5-benign")),
        ("p2p5-node4-labelflip", lambda: p2p5_scenario("p2p5-node4-labelflip", (4,))),
        (
            "p2p5-majority-compromised",
            lambda: p2p5_scenario("p2p5-majority-compromised", (1, 3, 5)).replace(
                verdict_coordinates=MAJORITY_VERDICT_COORDINATES
            ),
        ),
        (
            "p2p5-bayp2pfl-labelflip",
            lambda: p2p5_scenario("p2p5-bayp2pfl-labelflip", (4,), algorithm="bayp2pfl"),
        ),
        (
            "p2p5-line-node4-labelflip",
            lambda: p2p5_scenario(
                "p2p5-line-node4-labelflip", (4,), shape="line", expected_fail=True
            ),
        ),
        (
            "graph-drop20",
            lambda: _drop_scenario("graph-drop20", period=None),
        ),
        (
            "graph-timevarying",
            lambda: _drop_scenario("graph-timevarying", period=100),
        ),
    ]
)


def _drop_scenario(name, period):
    base = sweep_scenario("labelflip", 10, name=name)
    topology = network.Topology(
        base.task.clients, shape="complete", drop_fraction=0.2, period=period, seed=base.seed
    )
    return base.replace(topology=topology)


def available_presets():
    """Names of the fixed presets followed by the sweep family pattern."""
    return list(_FIXED) + [
        "n50-<" + "|".join(SWEEP_ATTACKS) + ">-<count>[-s<size>][-<" + "|".join(PLACEMENTS) + ">]"
    ]


def preset(name):
    """Build a named scenario.

    Examples
    --------
    >>> preset("p2p5-majority-compromised").compromised
    (1, 3, 5)

    Parameters
    ----------
    name : str

    Returns
    -------
    scenario : Scenario

    Raises
    ------
    ConfigurationError
        For an unknown name (the message lists the available presets), or a
        label-flip preset under the robust rule that violates the joint
        learning condition.
    """
    if name in _FIXED:
        scenario = _FIXED[name]()
    else:
        match = SWEEP_PATTERN.match(name)
        if match is None or match.group("attack") not in SWEEP_ATTACKS or (
            match.group("placement") is not None and match.group("placement") not in PLACEMENTS
        ):
            raise util.ConfigurationError(
                f"unknown preset {name!r}; available presets: {', '.join(available_presets())}"
            )
        size = match.group("size")
        scenario = sweep_scenario(
            match.group("attack"),
            int(match.group("count")),
            size=None if size is None else int(size),
            placement=match.group("placement"),
            name=name,
        )
    scenario.validate()
    if (
        not scenario.expected_fail
        and scenario.algorithm == "sabre"
        and scenario.label_bias() is not None
    ):
        pairs = joint_learning_violations(scenario)
        if pairs:
            raise util.ConfigurationError(
                f"preset {name!r} violates joint learning for pairs {pairs}"
            )
    return scenario


def _communication(scenario, horizon):
    union = np.zeros((len(scenario.task.clients),) * 2, dtype=bool)
    epochs = horizon
    if scenario.topology.kind == "static":
        epochs = 1
    for tick in range(epochs):
        union |= scenario.topology.adjacency(tick)
    return union


def joint_learning_violations(scenario, horizon=CONNECTIVITY_HORIZON):
    """Benign/compromised pairs that communicate but share no coordinate.

    Returns
    -------
    pairs : list of (int, int)
        ``(benign, compromised)`` pairs
    """
    nodes = scenario.topology.nodes
    union = _communication(scenario, min(horizon, scenario.t_max))
    union = union | union.T
    supports = scenario.task.support_sets
    pairs = []
    for i, benign in enumerate(nodes):
        if benign in scenario.attacks:
            continue
        for j, attacker in enumerate(nodes):
            if attacker in scenario.attacks and union[i, j]:
                if not set(supports[benign]) & set(supports[attacker]):
                    pairs.append((benign, attacker))
    return pairs


@dataclasses.dataclass(frozen=True)
class AssumptionReport:
    """Outcome of :func:`check_assumptions`."""

    sufficiency: bool
    connectivity: network.ConnectivityVerdict
    joint_learning: list
    detection_probability: dict

    @property
    def satisfied(self):
        return self.sufficiency and self.connectivity.satisfied and not self.joint_learning

    def to_dict(self):
        return collections.OrderedDict(
            [
                ("sufficiency", self.sufficiency),
                ("relaxed_connectivity", self.connectivity.to_dict()),
                ("joint_learning_violations", [list(p) for p in self.joint_learning]),
                ("detection_probability", {str(c): p for c, p in self.detection_probability.items()}),
                ("satisfied", self.satisfied),
            ]
        )


def check_assumptions(scenario, horizon=None, window_search_limit=network.WINDOW_SEARCH_LIMIT):
    """Evaluate the standing assumptions on a scenario without running it.

    Parameters
    ----------
    scenario : Scenario
    horizon : int or None
        Ticks covered by the connectivity search; defaults to
        ``min(t_max, 1000)``
    window_search_limit : int

    Returns
    -------
    report : AssumptionReport
        Sufficiency of the benign supports, relaxed connectivity of the
        benign subgraph, joint-learning violations of label-flip attackers,
        and, for general-random attackers, each benign client's detection
        probability.
    """
    horizon = min(scenario.t_max, CONNECTIVITY_HORIZON) if horizon is None else horizon
    benign = scenario.benign
    sufficiency = scenario.task.is_sufficient(benign)
    connectivity = network.check_relaxed_connectivity(
        scenario.topology.subgraph(benign), horizon, window_search_limit
    )
    joint = joint_learning_violations(scenario, horizon) if scenario.label_bias() is not None else []
    detection = collections.OrderedDict()
    spec = scenario.attack_kinds().get("general-random")
    if spec is not None:
        dim = scenario.task.dim
        for client in benign:
            fraction = len(scenario.task.support_sets[client]) / dim
            detection[client] = adversary.detection_probability(dim, fraction, spec.tampered_fraction)
    return AssumptionReport(sufficiency, connectivity, joint, detection)
