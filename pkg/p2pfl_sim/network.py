"""
Clients communicate over a time-varying directed graph.  The graph is sampled
once per joint tick, a global time slot as long as the slowest client's local
cycle; faster clients run several local cycles in the same joint tick.

Conventions
-----------
Adjacency matrices are boolean ``(n, n)`` arrays indexed by the position of a
client in :attr:`Topology.nodes`; entry ``(i, j)`` is set iff ``j`` can send to
``i`` during the tick.  Self-loops are never stored: every client implicitly
hears itself.

Topology schedules come in three kinds:

* ``'static'``: one adjacency for every tick;
* ``'periodic-random-drop'``: a fraction of the directed edges of the base
  graph is dropped at random, and the dropped set is redrawn every ``period``
  ticks (never, when ``period`` is ``None``);
* ``'scripted'``: an explicit list of adjacencies, cycled over.

Operations
----------
* :func:`p2pfl_sim.network.neighbors_in`: in-neighbours of a client
* :func:`p2pfl_sim.network.check_relaxed_connectivity`: greedy search for
  windows over which the product of adjacencies is strongly connected
"""

import dataclasses

import numpy as np
from scipy.sparse import csr_matrix
from scipy.sparse.csgraph import connected_components

from . import util

SHAPES = ("complete", "empty", "ring", "line", "edges")

WINDOW_SEARCH_LIMIT = 100


def _edge_matrix(nodes, edges):
    position = {node: p for p, node in enumerate(nodes)}
    adjacency = np.zeros((len(nodes), len(nodes)), dtype=bool)
    for sender, receiver in edges:
        if sender not in position or receiver not in position:
            raise util.ConfigurationError(
                f"edge ({sender}, {receiver}) names a client outside {list(nodes)}"
            )
        adjacency[position[receiver], position[sender]] = True
    np.fill_diagonal(adjacency, False)
    return adjacency


def _shape_edges(nodes, shape, chords=()):
    n = len(nodes)
    if shape == "complete":
        return [(a, b) for a in nodes for b in nodes if a != b]
    if shape == "empty":
        return []
    if shape == "line":
        pairs = [(nodes[p], nodes[p + 1]) for p in range(n - 1)]
    elif shape == "ring":
        pairs = [(nodes[p], nodes[(p + 1) % n]) for p in range(n)] if n > 1 else []
    else:
        raise util.ConfigurationError(f"unknown topology shape {shape!r}; expected one of {SHAPES}")
    pairs = pairs + [tuple(chord) for chord in chords]
    return [(a, b) for a, b in pairs] + [(b, a) for a, b in pairs]


class Topology(object):
    """A time-varying directed communication graph.

    Parameters
    ----------
    nodes : iterable of int
        Client ids
    shape : str
        ``'complete'``, ``'empty'``, ``'ring'``, ``'line'`` (all
        bidirectional) or ``'edges'``
    edges : iterable of (int, int)
        Directed ``(sender, receiver)`` pairs when ``shape='edges'``
    chords : iterable of (int, int)
        Extra bidirectional edges for ``'ring'`` and ``'line'``
    drop_fraction : float in [0, 1)
        Fraction of directed edges dropped (periodic-random-drop)
    period : int or None
        Ticks between redraws of the dropped edges
    seed : int
        Seed of the edge-dropping stream
    schedule : list of iterables of (int, int) or None
        Per-tick directed edge lists, cycled over (scripted)
    """

    def __init__(self, nodes, shape="complete", edges=(), chords=(), drop_fraction=0.0,
                 period=None, seed=0, schedule=None):
        self.nodes = tuple(sorted(int(node) for node in nodes))
        if len(set(self.nodes)) != len(self.nodes) or not self.nodes:
            raise util.ConfigurationError("topology nodes must be distinct and nonempty")
        if shape not in SHAPES:
            raise util.ConfigurationError(f"unknown topology shape {shape!r}; expected one of {SHAPES}")
        self.shape = shape
        self.chords = tuple(tuple(int(c) for c in chord) for chord in chords)
        self.edges = tuple(tuple(int(e) for e in edge) for edge in edges)
        self.drop_fraction = float(drop_fraction)
        if not 0 <= self.drop_fraction < 1:
            raise util.ConfigurationError(
                f"drop_fraction must lie in [0, 1), got {drop_fraction!r}"
            )
        if period is not None and int(period) < 1:
            raise util.ConfigurationError(f"period must be >= 1, got {period!r}")
        self.period = None if period is None else int(period)
        self.seed = int(seed)
        if shape == "edges":
            base = self.edges
        else:
            base = _shape_edges(self.nodes, shape, self.chords)
        self._base = _edge_matrix(self.nodes, base)
        self.schedule = None
        self._scripted = None
        if schedule is not None:
            self.schedule = tuple(
                tuple(tuple(int(e) for e in edge) for edge in edges) for edges in schedule
            )
            if not self.schedule:
                raise util.ConfigurationError("a scripted schedule needs at least one tick")
            self._scripted = [_edge_matrix(self.nodes, edges) for edges in self.schedule]
        self._position = {node: p for p, node in enumerate(self.nodes)}
        self._view = np.arange(len(self.nodes))
        self._dropped = {}

    @property
    def kind(self):
        if self._scripted is not None:
            return "scripted"
        if self.drop_fraction > 0:
            return "periodic-random-drop"
        return "static"

    @classmethod
    def scripted(cls, nodes, schedule):
        """Cycle through explicit per-tick ``(sender, receiver)`` edge lists."""
        return cls(nodes, shape="empty", schedule=schedule)

    def _full_adjacency(self, tick):
        if self._scripted is not None:
            return self._scripted[tick % len(self._scripted)]
        if self.drop_fraction == 0:
            return self._base
        epoch = 0 if self.period is None else tick // self.period
        if epoch not in self._dropped:
            self._dropped[epoch] = self._drop(epoch)
        return self._dropped[epoch]

    def _drop(self, epoch):
        rng = np.random.default_rng(util.derive_seed(self.seed, util.TOPOLOGY_STREAM, epoch))
        receivers, senders = np.nonzero(self._base)
        n_drop = int(round(self.drop_fraction * receivers.size))
        chosen = rng.choice(receivers.size, size=n_drop, replace=False)
        adjacency = self._base.copy()
        adjacency[receivers[chosen], senders[chosen]] = False
        return adjacency

    def adjacency(self, tick):
        """Boolean adjacency for joint tick ``tick`` (rows receive)."""
        if tick < 0:
            raise util.ConfigurationError(f"tick must be >= 0, got {tick!r}")
        full = self._full_adjacency(int(tick))
        return full[np.ix_(self._view, self._view)]

    def members(self):
        """Ids visible in this (possibly restricted) view, in matrix order."""
        return tuple(self.nodes[p] for p in self._view)

    def subgraph(self, nodes):
        """The same schedule restricted to ``nodes``."""
        nodes = sorted(set(int(node) for node in nodes))
        for node in nodes:
            self.check_node(node)
        view = Topology.__new__(Topology)
        view.__dict__.update(self.__dict__)
        view._view = np.array([self._position[node] for node in nodes], dtype=int)
        return view

    def check_node(self, node):
        if node not in self._position:
            raise util.ConfigurationError(
                f"unknown client id {node!r}; known ids: {list(self.nodes)}"
            )

    def to_dict(self):
        data = {
            "shape": self.shape,
            "drop_fraction": self.drop_fraction,
            "period": self.period,
            "seed": self.seed,
        }
        if self.chords:
            data["chords"] = [list(chord) for chord in self.chords]
        if self.shape == "edges":
            data["edges"] = [list(edge) for edge in self.edges]
        if self.schedule is not None:
            data["schedule"] = [[list(edge) for edge in edges] for edges in self.schedule]
        return data

    @classmethod
    def from_dict(cls, nodes, data):
        known = {"shape", "edges", "chords", "drop_fraction", "period", "seed", "schedule"}
        unknown = sorted(set(data) - known)
        if unknown:
            raise util.ConfigurationError(f"unknown topology field(s): {', '.join(unknown)}")
        return cls(nodes, **data)


@dataclasses.dataclass(frozen=True)
class JointClock:
    """Maps every client's local cycles onto joint ticks.

    Client ``i``'s local cycles end at the positive abstract times
    ``phase[i] + m * cycle_length[i]`` (``m >= 0``), so a nonzero phase makes
    the first cycle a short one ending at ``phase[i]``.  A cycle belongs to
    joint tick ``t`` when it ends in ``(t * L, (t + 1) * L]`` with ``L`` the
    longest cycle; every client therefore has at least one cycle per tick.

    Parameters
    ----------
    cycle_lengths : dict
        ``client -> positive integer`` duration in abstract time units
    phases : dict or None
        ``client -> offset`` in ``[0, cycle_length)``; zero when omitted
    """

    cycle_lengths: dict
    phases: dict = None

    def __post_init__(self):
        lengths = {}
        for client, length in self.cycle_lengths.items():
            if int(length) != length or length < 1:
                raise util.ConfigurationError(
                    f"client {client} cycle length must be a positive integer, got {length!r}"
                )
            lengths[int(client)] = int(length)
        if not lengths:
            raise util.ConfigurationError("a joint clock needs at least one client")
        phases = {client: 0 for client in lengths}
        for client, phase in (self.phases or {}).items():
            if client not in lengths:
                raise util.ConfigurationError(f"phase given for unknown client {client!r}")
            if int(phase) != phase or not 0 <= phase < lengths[client]:
                raise util.ConfigurationError(
                    f"client {client} phase must be an integer in [0, {lengths[client]}), "
                    f"got {phase!r}"
                )
            phases[client] = int(phase)
        object.__setattr__(self, "cycle_lengths", lengths)
        object.__setattr__(self, "phases", phases)

    @property
    def tick_length(self):
        return max(self.cycle_lengths.values())

    def slots(self, tick):
        """Local slots ending in joint tick ``tick``.

        Returns
        -------
        slots : list of (int, int)
            ``(end_time, client)`` pairs sorted by end time, then client
        """
        length = self.tick_length
        start, stop = tick * length, (tick + 1) * length
        slots = []
        for client, cycle in self.cycle_lengths.items():
            phase = self.phases[client]
            first = (start - phase) // cycle + 1
            last = (stop - phase) // cycle
            slots.extend((phase + m * cycle, client) for m in range(max(first, 0), last + 1))
        return sorted(slots)


def neighbors_in(topology, tick, client):
    """Clients whose messages ``client`` receives during ``tick``, itself included.

    Examples
    --------
    >>> neighbors_in(Topology([1, 2, 3], shape="empty"), 0, 2)
    {2}

    Parameters
    ----------
    topology : Topology
    tick : int >= 0
    client : int

    Returns
    -------
    senders : set of int

    Raises
    ------
    ConfigurationError
        For an unknown client or a negative tick.
    """
    topology.check_node(client)
    members = topology.members()
    if client not in members:
        raise util.ConfigurationError(f"client {client} is outside this subgraph")
    row = topology.adjacency(tick)[members.index(client)]
    return {members[p] for p in np.flatnonzero(row)} | {client}


def is_strongly_connected(adjacency):
    """Whether the directed graph of a boolean matrix is strongly connected."""
    if adjacency.shape[0] <= 1:
        return True
    n_components, _ = connected_components(
        csr_matrix(adjacency.astype(np.int8)), directed=True, connection="strong"
    )
    return n_components == 1


@dataclasses.dataclass(frozen=True)
class ConnectivityVerdict:
    """Outcome of :func:`check_relaxed_connectivity`.

    Attributes
    ----------
    satisfied : bool
    windows : list of (int, int)
        Inclusive ``(first, last)`` tick of every witness window found
    counterexample : tuple of (int, int) or None
        ``(first, last)`` tick of the prefix that never became strongly
        connected
    """

    satisfied: bool
    windows: list
    counterexample: tuple = None

    def to_dict(self):
        return {
            "satisfied": self.satisfied,
            "windows": [list(w) for w in self.windows],
            "counterexample": None if self.counterexample is None else list(self.counterexample),
        }


def check_relaxed_connectivity(topology, horizon, window_search_limit=WINDOW_SEARCH_LIMIT):
    """Search for consecutive windows whose adjacency products are strongly connected.

    Starting from tick 0, each window is extended one tick at a time, keeping
    the boolean product of ``A_t + I`` over the window, until the product is
    strongly connected.  The search stops once the windows cover
    ``horizon`` ticks, or fails when a window reaches
    ``window_search_limit`` ticks without becoming strongly connected.

    Examples
    --------
    >>> ring = Topology([1, 2, 3, 4], shape="ring")
    >>> check_relaxed_connectivity(ring, 3).windows
    [(0, 0), (1, 1), (2, 2)]

    Parameters
    ----------
    topology : Topology
    horizon : int >= 1
        Number of ticks to cover
    window_search_limit : int >= 1
        Longest window tried

    Returns
    -------
    verdict : ConnectivityVerdict
    """
    if horizon < 1:
        raise util.ConfigurationError(f"horizon must be >= 1, got {horizon!r}")
    if window_search_limit < 1:
        raise util.ConfigurationError(
            f"window_search_limit must be >= 1, got {window_search_limit!r}"
        )
    n = len(topology.members())
    identity = np.eye(n, dtype=bool)
    windows = []
    start = 0
    while start < horizon:
        product = identity
        for length in range(1, window_search_limit + 1):
            tick = start + length - 1
            step = topology.adjacency(tick) | identity
            product = (step.astype(np.int64) @ product.astype(np.int64)) > 0
            if is_strongly_connected(product):
                windows.append((start, tick))
                start = tick + 1
                break
        else:
            return ConnectivityVerdict(False, windows, (start, start + window_search_limit - 1))
    return ConnectivityVerdict(True, windows)
