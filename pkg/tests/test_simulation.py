"""
Unit and regression tests for p2pfl_sim.simulation
"""

import numpy as np
import pytest

from p2pfl_sim import adversary, analysis, network, presets, simulation, util

THETA = np.array(presets.P2P5_THETA)


def tiny(t_max=30, **changes):
    return presets.p2p5_scenario("tiny").replace(t_max=t_max, **changes)


@pytest.fixture(scope="module")
def benign_run():
    scenario = presets.preset("p2p5-benign")
    return scenario, simulation.simulate(scenario)


@pytest.fixture(scope="module")
def node4_run():
    scenario = presets.preset("p2p5-node4-labelflip")
    return scenario, simulation.simulate(scenario)


def test_world_from_scenario():
    scenario = tiny()
    world = simulation.World.from_scenario(scenario)
    assert sorted(world.clients) == [1, 2, 3, 4, 5]
    for client, state in world.clients.items():
        assert state.local_clock == 0
        assert np.array_equal(state.social_belief.mean, np.zeros(3))
        assert state.local_belief.diagonal == scenario.diagonal
        features, labels = world.validation_sets[client]
        assert features.shape == (scenario.validation_size, 3)
    assert world.clients[4].compromise is None


def test_step():
    world = simulation.World.from_scenario(tiny())
    world, rows = simulation.step(world)
    assert world.tick == 1
    assert [row.client for row in rows] == [1, 2, 3, 4, 5]
    assert all(row.cycle == 1 and row.tick == 0 for row in rows)
    # Every client considers what its neighbours sent this tick
    assert rows[0].received == (2, 5)
    assert rows[1].received == (1, 3, 4)
    with pytest.raises(util.ConfigurationError, match="tick"):
        simulation.step(world, tick=5)


def test_simulate_rows():
    scenario = tiny()
    record = simulation.simulate(scenario)
    assert len(record) == 5 * scenario.t_max
    orders = [row.order for row in record.rows]
    assert orders == sorted(orders)
    final = record.final_rows()
    assert all(final[c].terminated and final[c].cycle == scenario.t_max for c in record.clients)
    assert record.compromised == ()


def test_simulate_deterministic():
    scenario = tiny(attacks={4: adversary.AttackSpec("general-random")})
    first = simulation.simulate(scenario)
    second = simulation.simulate(scenario)
    assert all(a.same_as(b) for a, b in zip(first.rows, second.rows))


@pytest.mark.parametrize("workers", [2, 4])
def test_simulate_worker_independent(workers):
    scenario = tiny(attacks={4: adversary.AttackSpec("a-little-is-enough")})
    serial = simulation.simulate(scenario)
    parallel = simulation.simulate(scenario, workers=workers)
    assert len(serial) == len(parallel)
    assert all(a.same_as(b) for a, b in zip(serial.rows, parallel.rows))


def test_simulate_seed():
    a = simulation.simulate(tiny(t_max=5))
    b = simulation.simulate(tiny(t_max=5, seed=1))
    assert not np.array_equal(a.rows[-1].social_mean, b.rows[-1].social_mean)


@pytest.mark.parametrize("workers", [0, 1.5])
def test_simulate_bad_workers(workers):
    with pytest.raises(util.ConfigurationError, match="workers"):
        simulation.simulate(tiny(t_max=2), workers=workers)


def test_heterogeneous_cycles():
    scenario = tiny(t_max=12, cycle_lengths={1: 1, 2: 2, 3: 3, 4: 4, 5: 4})
    record = simulation.simulate(scenario)
    for client in record.clients:
        rows = record.rows_for(client)
        assert [row.cycle for row in rows] == list(range(1, 13))
    # The fastest client is done after 3 joint ticks, the slowest after 12
    assert record.final_rows()[1].tick == 2
    assert record.final_rows()[5].tick == 11


def test_sigma_threshold_terminates():
    scenario = tiny(t_max=500, sigma_threshold=1.0)
    record = simulation.simulate(scenario)
    for client, row in record.final_rows().items():
        assert row.terminated
        assert row.social_trace <= 1.0
        assert row.cycle < 500


def test_freeze_local():
    scenario = tiny(t_max=100, freeze_patience=1)
    record = simulation.simulate(scenario)
    rows = record.rows_for(1)
    frozen = [n for n, row in enumerate(rows) if "local-frozen" in row.events]
    assert len(frozen) == 1
    after = rows[frozen[0]:]
    assert all(np.array_equal(row.local_mean, after[0].local_mean) for row in after)


def test_trim_clamped():
    scenario = tiny(t_max=2, algorithm="trimmed-mean", trim=3)
    with pytest.warns(UserWarning, match="trim count clamped"):
        record = simulation.simulate(scenario)
    assert all("trim-clamped" in row.events for row in record.rows)


def test_alie_degraded():
    task = presets.p2p5_task()
    nodes = list(task.clients)
    spec = adversary.AttackSpec("a-little-is-enough")
    scenario = presets.Scenario(
        name="all-alie",
        task=task,
        topology=network.Topology(nodes),
        attacks={c: spec for c in nodes},
        t_max=2,
    )
    with pytest.warns(util.DegradedAttackWarning):
        record = simulation.simulate(scenario)
    assert all("degraded-attack" in row.events for row in record.rows)


def test_message_ttl():
    # Client 1 sends once per joint tick, its neighbours four times
    scenario = tiny(t_max=8, cycle_lengths={1: 4}, message_ttl=1)
    record = simulation.simulate(scenario)
    heard = [(3, 4)] * 3 + [(1, 3, 4)]
    assert [row.received for row in record.rows_for(2)] == heard * 2
    kept = simulation.simulate(scenario.replace(message_ttl=None))
    assert [row.received for row in kept.rows_for(2)] == heard + [(1, 3, 4)] * 4


def test_duplicate_messages_collapse():
    # Clients 2 and 5 send four times per joint tick, client 1 aggregates once
    scenario = tiny(t_max=8, cycle_lengths={1: 4})
    world = simulation.World.from_scenario(scenario)
    world, rows = simulation.step(world)
    assert len([row for row in rows if row.client == 2]) == 4
    assert [row.received for row in rows if row.client == 1] == [(2, 5)]
    # Only the latest message per sender is kept
    assert {2, 5} <= set(world.mailboxes[1])
    assert all(sent == 0 for _, sent in world.mailboxes[1].values())


def test_isolated_client_learns_alone():
    task = presets.p2p5_task()
    edges = [(1, 2), (2, 1), (2, 3), (3, 2), (3, 4), (4, 3)]
    scenario = presets.Scenario(
        name="isolated",
        task=task,
        topology=network.Topology(task.clients, shape="edges", edges=edges),
        t_max=100,
    )
    alone = scenario.replace(topology=network.Topology(task.clients, shape="empty"))
    rows = simulation.simulate(scenario).rows_for(5)
    solo = simulation.simulate(alone).rows_for(5)
    assert len(rows) == len(solo) == 100
    for row, again in zip(rows, solo):
        assert row.received == ()
        assert np.array_equal(row.social_mean, again.social_mean)
        assert np.array_equal(row.social_variances, again.social_variances)
    assert np.isclose(rows[-1].local_error, presets.solo_local_error(task, 5, 100), atol=1e-12)


def test_single_client_rate():
    task = presets.p2p5_task()
    scenario = presets.Scenario(
        name="solo", task=task, topology=network.Topology(task.clients, shape="empty"), t_max=1000
    )
    record = simulation.simulate(scenario)
    for client in task.clients:
        for k in task.support_sets[client]:
            slope = analysis.mse_rate_fit(record, client, k, (50, 1000)).slope
            assert -1.15 <= slope <= -0.85


def test_bayp2pfl_bit_flip_breach():
    scenario = tiny(t_max=2000, algorithm="bayp2pfl", attacks={4: adversary.AttackSpec("bit-flip")})
    with pytest.raises(util.InvariantBreach) as excinfo:
        simulation.simulate(scenario)
    breach = excinfo.value
    assert breach.client in scenario.benign
    assert isinstance(breach.record, analysis.RunRecord)
    assert all(np.all(np.isfinite(row.social_mean)) for row in breach.record.rows
               if row.client in scenario.benign)


def test_sabre_bit_flip_contained():
    scenario = tiny(t_max=300, attacks={4: adversary.AttackSpec("bit-flip")})
    record = simulation.simulate(scenario)
    for client in scenario.benign:
        row = record.final_rows()[client]
        assert np.all(np.isfinite(row.social_mean))
        assert np.max(np.abs(row.social_mean - THETA)) < 0.05


def test_general_random_blows_up_bayp2pfl():
    scenario = tiny(t_max=20, algorithm="bayp2pfl", attacks={4: adversary.AttackSpec("general-random")})
    record = simulation.simulate(scenario)
    assert record.final_rows()[3].social_error > 1.0


def test_benign_learns(benign_run):
    scenario, record = benign_run
    summary = analysis.evaluate(record, scenario)
    assert all(v["verdict"] == analysis.CLEAN for v in summary["Bias verdicts"].values())


def test_benign_rate(benign_run):
    scenario, record = benign_run
    report = analysis.guarantee_report(record, scenario)
    assert report["rate slopes"]
    for per in report["summary"]["MSE slopes"].values():
        for slope in per.values():
            assert -1.3 <= slope <= -0.7


def test_node4_excluded(node4_run):
    scenario, record = node4_run
    events = analysis.exclusion_events(record)
    for observer in (2, 3, 5):
        assert events[(observer, 4)].permanent
    report = analysis.guarantee_report(record, scenario)
    assert report["attackers excluded"]
    assert report["benign clients clean"]


def test_node4_heard_by_neighbours(node4_run):
    scenario, record = node4_run
    # The attacker only ever appears in its neighbours' received lists
    for row in record.rows:
        if 4 in row.received:
            assert row.client in (2, 3, 5)


def test_majority_compromised_clean():
    scenario = presets.preset("p2p5-majority-compromised")
    record = simulation.simulate(scenario)
    summary = analysis.evaluate(record, scenario)
    assert summary["Verdict coordinates"] == [1]
    for client in scenario.benign:
        assert summary["Bias verdicts"][str(client)]["verdict"] == analysis.CLEAN
    final = record.final_rows()
    for client in scenario.benign:
        support = list(scenario.task.support_sets[client])
        assert np.max(np.abs(final[client].social_mean[support] - THETA[support])) < 0.05


def test_bayp2pfl_biased():
    scenario = presets.preset("p2p5-bayp2pfl-labelflip")
    record = simulation.simulate(scenario)
    summary = analysis.evaluate(record, scenario)
    assert summary["Verdict coordinates"] == [1, 2]
    for client in scenario.benign:
        verdict = summary["Bias verdicts"][str(client)]
        assert verdict["verdict"] == analysis.BIASED
        assert np.all(np.array(verdict["c_hat"])[1:] > 0.1)
        # The estimate of the second coordinate is off by more than 10 * eps_clean
        assert verdict["c_hat"][1] * scenario.label_bias() > 10 * scenario.eps_clean


def test_sabre_majority_label_flip_clean():
    scenario = presets.sweep_scenario("labelflip", 9, clients=15)
    record = simulation.simulate(scenario)
    summary = analysis.evaluate(record, scenario)
    for client in scenario.benign:
        assert summary["Bias verdicts"][str(client)]["verdict"] == analysis.CLEAN


def test_trimmed_mean_majority_label_flip_degrades():
    scenario = presets.sweep_scenario("labelflip", 9, clients=15, t_max=200)
    scenario = scenario.replace(algorithm="trimmed-mean")
    with pytest.warns(UserWarning, match="trim count clamped"):
        record = simulation.simulate(scenario)
    summary = analysis.evaluate(record, scenario)
    for client in scenario.benign:
        assert summary["Bias verdicts"][str(client)]["verdict"] != analysis.CLEAN


def test_sabre_trojan_fails():
    scenario = presets.sweep_scenario("trojan", 5, clients=15, t_max=300)
    record = simulation.simulate(scenario)
    summary = analysis.evaluate(record, scenario)
    assert summary["Attack success"]["trojan"] < 0.1


@pytest.fixture(scope="module")
def sweep_baseline():
    scenario = presets.preset("n50-labelflip-0")
    return analysis.evaluate(simulation.simulate(scenario), scenario)["Clean test MSE"]


def sweep_summary(name, **changes):
    scenario = presets.preset(name).replace(**changes)
    return analysis.evaluate(simulation.simulate(scenario), scenario)


@pytest.mark.slow
@pytest.mark.parametrize("attack", sorted(presets.SWEEP_ATTACKS))
def test_sabre_sweep_attacks(sweep_baseline, attack):
    summary = sweep_summary(f"n50-{attack}-10")
    assert summary["Clean test MSE"] <= 2 * sweep_baseline
    if attack == "trojan":
        assert summary["Attack success"]["trojan"] < 0.1


@pytest.mark.slow
def test_bayp2pfl_sweep_general_random(sweep_baseline):
    summary = sweep_summary("n50-generalrandom-10", algorithm="bayp2pfl")
    assert summary["Clean test MSE"] > 10 * sweep_baseline


@pytest.mark.slow
def test_bayp2pfl_sweep_bit_flip():
    scenario = presets.preset("n50-bitflip-10").replace(algorithm="bayp2pfl")
    with pytest.raises(util.InvariantBreach) as excinfo:
        simulation.simulate(scenario)
    summary = analysis.breach_summary(excinfo.value, scenario)
    assert summary["Vulnerability witness"]
    assert summary["Clean test MSE"] == np.inf


@pytest.mark.slow
@pytest.mark.parametrize("count", [10, 30, 40])
def test_sabre_sweep_attacker_count(count):
    scenario = presets.preset(f"n50-labelflip-{count}")
    summary = analysis.evaluate(simulation.simulate(scenario), scenario)
    for client in scenario.benign:
        assert summary["Bias verdicts"][str(client)]["verdict"] == analysis.CLEAN


@pytest.mark.slow
def test_trimmed_mean_sweep_degrades(sweep_baseline):
    with pytest.warns(UserWarning, match="trim count clamped"):
        summary = sweep_summary("n50-labelflip-30", algorithm="trimmed-mean")
    assert summary["Clean test MSE"] > 5 * sweep_baseline
