"""
The discrete-event engine.  One call to :func:`step` executes one joint tick:
every local slot that ends during the tick runs the client loop

1. draw a batch from the client's stream (poisoned, for a data attacker),
2. update the local and the social belief with it,
3. build the outbound message (poisoned, for a model attacker),
4. deliver it to the out-neighbours of the tick,
5. aggregate the social belief with the messages received,
6. apply the local-overwrite safeguard (robust rule only),
7. check the termination condition.

Conventions
-----------
Slots of a tick are grouped by their end time; within a group all data
updates and message construction happen first, then delivery, then
aggregation, so a group of equal-length clients behaves exactly like a
synchronous round.  Mailboxes keep the latest message of every sender; a
message stays usable until it is replaced, or for ``message_ttl`` ticks when
that is set.

Every client owns its data, attack and validation streams, all derived from
the master seed, so a run is bitwise reproducible for any worker count.

A non-finite value in a benign client's own beliefs aborts the run with a
:class:`p2pfl_sim.util.InvariantBreach`; the rows emitted so far are attached
to the exception as ``error.record``.

Operations
----------
* :func:`p2pfl_sim.simulation.step`: one joint tick
* :func:`p2pfl_sim.simulation.simulate`: run a scenario to completion
"""

import concurrent.futures
import contextlib
import dataclasses
import functools
import itertools
import operator
import warnings

import numpy as np

from . import adversary
from . import aggregation
from . import analysis
from . import belief as belief_module
from . import learning
from . import network
from . import util


@dataclasses.dataclass
class World:
    """Complete mutable state of a run between joint ticks."""

    scenario: object
    clients: dict
    clock: network.JointClock
    mailboxes: dict
    validation_sets: dict
    params: aggregation.ConfidenceParams
    tick: int = 0

    @classmethod
    def from_scenario(cls, scenario):
        """Initialize every client at the prior with its own seeded streams.

        Raises
        ------
        ConfigurationError
            If the scenario is inconsistent (see
            :meth:`p2pfl_sim.presets.Scenario.validate`).
        """
        scenario.validate()
        task = scenario.task
        data_streams = util.spawn_streams(scenario.seed, task.clients, util.DATA_STREAM)
        attack_streams = util.spawn_streams(scenario.seed, task.clients, util.ATTACK_STREAM)
        validation_streams = util.spawn_streams(
            scenario.seed, task.clients, util.VALIDATION_STREAM
        )
        clients = {}
        validation_sets = {}
        for client in task.clients:
            prior = belief_module.GaussianBelief.prior(
                task.dim, scenario.prior_variance, diagonal=scenario.diagonal
            )
            clients[client] = belief_module.ClientState(
                id=client,
                local_belief=prior,
                social_belief=prior,
                cycle_length=scenario.cycle_lengths.get(client, 1),
                compromise=scenario.attacks.get(client),
                rng=data_streams[client],
                attack_rng=attack_streams[client],
            )
            rng = validation_streams[client]
            features = task.sample_features(client, scenario.validation_size, rng)
            validation_sets[client] = (features, task.label(client, features, rng))
        clock = network.JointClock(
            {c: state.cycle_length for c, state in clients.items()}, scenario.phases
        )
        return cls(
            scenario=scenario,
            clients=clients,
            clock=clock,
            mailboxes={client: {} for client in clients},
            validation_sets=validation_sets,
            params=aggregation.ConfidenceParams(scenario.kappa),
        )

    @property
    def finished(self):
        return all(state.terminated for state in self.clients.values())


def _map(executor, function, items):
    if executor is None:
        return [function(item) for item in items]
    return list(executor.map(function, items))


def _observe(world, events, client):
    scenario = world.scenario
    task = scenario.task
    state = world.clients[client]
    state.advance_clock()
    features, labels = belief_module.sample_batch(task, client, scenario.batch_size, state.rng)
    spec = state.compromise
    if spec is not None and spec.poisons_data:
        features, labels = adversary.poison_data((features, labels), spec, state.attack_rng)
    noise = task.noise_variance[client]
    if not state.local_model_frozen:
        state.local_belief = learning.update_batch(state.local_belief, features, labels, noise)
    state.social_belief = learning.update_batch(state.social_belief, features, labels, noise)

    if scenario.freeze_patience is not None and not state.local_model_frozen:
        state.validation_history.append(
            aggregation.validation_loss(state.local_belief.mean, world.validation_sets[client])
        )
        if learning.should_freeze_local(state.validation_history, scenario.freeze_patience):
            state.local_model_frozen = True
            events[client].append("local-frozen")
    return state.social_belief


def _poison_messages(world, clients, outbound, events):
    benign = [outbound[c].mean for c in clients if not world.clients[c].is_compromised]
    context = np.vstack(benign) if benign else np.empty((0, world.scenario.task.dim))
    for client in clients:
        spec = world.clients[client].compromise
        if spec is None or not spec.poisons_model:
            continue
        if spec.kind == "a-little-is-enough" and context.shape[0] == 0:
            events[client].append("degraded-attack")
        outbound[client] = adversary.poison_model(
            outbound[client], context, spec, world.clients[client].attack_rng
        )


def _deliver(world, tick, adjacency, clients, outbound):
    members = world.scenario.topology.members()
    position = {node: p for p, node in enumerate(members)}
    for sender in clients:
        for p in np.flatnonzero(adjacency[:, position[sender]]):
            world.mailboxes[members[p]][sender] = (outbound[sender], tick)


def _inbox(world, tick, client):
    senders = network.neighbors_in(world.scenario.topology, tick, client) - {client}
    ttl = world.scenario.message_ttl
    received = {}
    for sender in sorted(senders):
        entry = world.mailboxes[client].get(sender)
        if entry is None:
            continue
        message, sent = entry
        if ttl is not None and tick - sent >= ttl:
            continue
        received[sender] = message
    return received


def _count_floored(beliefs):
    count = 0
    for b in beliefs:
        variances = np.diag(b.covariance)
        count += int(np.count_nonzero(variances < util.EIGEN_FLOOR))
    return count


def _baseline_params(world, client, n_updates, events):
    scenario = world.scenario
    trim = scenario.resolved_trim()
    legal = (n_updates - 1) // 2
    if trim > legal:
        warnings.warn(
            "trim count clamped to the largest value that keeps an update", UserWarning
        )
        events[client].append("trim-clamped")
        trim = legal
    return {
        "trim": trim,
        "tau": scenario.clip_tau,
        "validation": world.validation_sets[client],
        "drop": scenario.resolved_zeno_drop(),
        "rho": scenario.zeno_rho,
    }


def _aggregate(world, tick, events, client):
    scenario = world.scenario
    state = world.clients[client]
    local, own = state.local_belief, state.social_belief
    received = _inbox(world, tick, client)
    considered = tuple(sorted(set(received) | {client}))
    overwritten = ()
    try:
        if scenario.algorithm == "sabre":
            everyone = dict(received)
            everyone[client] = own
            accepted = aggregation.confidence_set(local, everyone, world.params)
            floored = _count_floored(everyone[j] for j in accepted)
            trust = aggregation.trust_weights(accepted, everyone)
            social = aggregation.sabre_aggregate(own, everyone, trust)
            overwritten = tuple(
                int(k) for k in aggregation.violated_coordinates(local, social, world.params)
            )
            social = aggregation.overwrite_rule(local, social, world.params)
            accepted = tuple(sorted(accepted))
        else:
            rule = "fixed-trust" if scenario.algorithm == "bayp2pfl" else scenario.algorithm
            floored = _count_floored([own] + list(received.values())) if rule == "fixed-trust" else 0
            params = _baseline_params(world, client, len(received) + 1, events)
            social = aggregation.baseline_aggregate(rule, own, received, own_id=client, **params)
            accepted = considered
    except util.NumericDegeneracyError as error:
        if state.is_compromised:
            social, accepted, floored = own, (client,), 0
        else:
            raise util.InvariantBreach(client, tick, str(error)) from error
    if floored:
        events[client].append(f"floor:{floored}")
    if not state.is_compromised and not (local.is_finite() and social.is_finite()):
        raise util.InvariantBreach(client, tick, "non-finite value in own beliefs")
    state.social_belief = social

    social_variances = np.diag(social.covariance).copy()
    if np.sum(social_variances) <= scenario.sigma_threshold or state.local_clock >= scenario.t_max:
        state.terminated = True
    theta_star = scenario.task.theta_star
    with np.errstate(over="ignore", invalid="ignore"):
        social_error = float(np.sum((social.mean - theta_star) ** 2))
        local_error = float(np.sum((local.mean - theta_star) ** 2))
    return analysis.RunRow(
        client=client,
        cycle=state.local_clock,
        tick=tick,
        social_mean=social.mean.copy(),
        social_variances=social_variances,
        social_error=social_error,
        local_mean=local.mean.copy(),
        local_variances=np.diag(local.covariance).copy(),
        local_error=local_error,
        received=tuple(sorted(received)),
        accepted=accepted,
        overwritten=overwritten,
        events=tuple(events[client]),
        terminated=state.terminated,
    )


def step(world, tick=None, executor=None):
    """Execute one joint tick.

    Parameters
    ----------
    world : World
        Mutated in place
    tick : int or None
        Must equal ``world.tick`` when given
    executor : concurrent.futures.Executor or None
        Runs per-client work in parallel; ``None`` runs it in id order

    Returns
    -------
    world : World
    rows : list of p2pfl_sim.analysis.RunRow
        Ordered by (joint tick, client id, local cycle)

    Raises
    ------
    InvariantBreach
        When a benign client's own beliefs become non-finite.
    """
    tick = world.tick if tick is None else tick
    if tick != world.tick:
        raise util.ConfigurationError(f"world is at tick {world.tick}, cannot step tick {tick}")
    adjacency = world.scenario.topology.adjacency(tick)
    rows = []
    for _, group in itertools.groupby(world.clock.slots(tick), key=operator.itemgetter(0)):
        clients = sorted(c for _, c in group if not world.clients[c].terminated)
        if not clients:
            continue
        events = {client: [] for client in clients}
        outbound = dict(zip(clients, _map(executor, functools.partial(_observe, world, events), clients)))
        _poison_messages(world, clients, outbound, events)
        _deliver(world, tick, adjacency, clients, outbound)
        rows.extend(
            _map(executor, functools.partial(_aggregate, world, tick, events), clients)
        )
    world.tick = tick + 1
    rows.sort(key=lambda row: row.order)
    return world, rows


def _executor(workers):
    if int(workers) != workers or workers < 1:
        raise util.ConfigurationError(f"workers must be a positive integer, got {workers!r}")
    if workers == 1:
        return contextlib.nullcontext()
    return concurrent.futures.ThreadPoolExecutor(max_workers=int(workers))


def simulate(scenario, workers=1):
    """Run a scenario until every client has terminated.

    Examples
    --------
    >>> record = simulate(p2pfl_sim.presets.preset("p2p5-benign"))

    Parameters
    ----------
    scenario : p2pfl_sim.presets.Scenario
    workers : int >= 1
        Worker threads; the output does not depend on it

    Returns
    -------
    record : p2pfl_sim.analysis.RunRecord

    Raises
    ------
    InvariantBreach
        With the partial record attached as ``error.record``.
    """
    world = World.from_scenario(scenario)
    rows = []
    with _executor(workers) as executor:
        try:
            while not world.finished:
                _, emitted = step(world, executor=executor)
                rows.extend(emitted)
        except util.InvariantBreach as error:
            error.record = _record(scenario, rows)
            raise
    return _record(scenario, rows)


def _record(scenario, rows):
    return analysis.RunRecord(
        rows, scenario.task.dim, scenario.task.clients, compromised=scenario.attacks
    )
