"""Heatdis stencil: hand-checked first step, decomposition invariance,
checkpoint/restart digests, multilevel recovery digests."""

import numpy as np
import pytest

from mcr.config import ConfigSyntaxError
from mcr.errors import InvalidStep
from mcr.faults import FaultPlan
from mcr.heatdis import (
    HeatdisConfig,
    init_block,
    reference_step,
    resume_heatdis,
    run_heatdis,
)


def naive_step(grid):
    """Independent oracle: scalar loops, no shared code with the kernel."""
    rows, cols = grid.shape
    out = grid.copy()
    for i in range(1, rows - 1):
        for j in range(1, cols - 1):
            out[i, j] = (grid[i - 1, j] + grid[i + 1, j]
                         + grid[i, j - 1] + grid[i, j + 1]) / 4.0
    out[0, :] = grid[0, :]
    out[-1, :] = grid[-1, :]
    out[:, 0] = grid[:, 0]
    out[:, -1] = grid[:, -1]
    return out


def test_single_step_4x4_hand_table():
    cfg = HeatdisConfig(rows=4, cols=4, iterations=1, ranks=1)
    grid = init_block(cfg, 0)
    new = reference_step(grid)
    # Interior cells average their 4 neighbors of the initial condition:
    # both row-1 interiors see the hot top row, row-2 interiors see nothing.
    expected = np.array([
        [100.0, 100.0, 100.0, 100.0],
        [0.0, 25.0, 25.0, 0.0],
        [0.0, 0.0, 0.0, 0.0],
        [0.0, 0.0, 0.0, 0.0],
    ])
    assert np.array_equal(new, expected)
    assert np.array_equal(new, naive_step(grid))


def test_kernel_matches_oracle_many_steps():
    rng = np.random.default_rng(5)
    grid = rng.random((12, 9))
    mine, ref = grid.copy(), grid.copy()
    for _ in range(10):
        mine = reference_step(mine)
        ref = naive_step(ref)
    assert np.array_equal(mine, ref)


def test_config_invariants():
    with pytest.raises(ConfigSyntaxError):
        HeatdisConfig(iterations=0)
    with pytest.raises(ConfigSyntaxError):
        HeatdisConfig(rows=10, ranks=4)
    with pytest.raises(ConfigSyntaxError):
        HeatdisConfig(ckpt_mode="transparent", ckpt_every=0)
    with pytest.raises(ConfigSyntaxError):
        HeatdisConfig(ckpt_mode="l9")


def test_decomposition_invariance():
    digests = {}
    for ranks in (1, 2, 4):
        cfg = HeatdisConfig(rows=32, cols=16, iterations=12, ranks=ranks)
        result, rt = run_heatdis(cfg, seed=1)
        digests[ranks] = result.digest
        assert result.outcome.status == "completed"
        rt.close()
    assert digests[1] == digests[2] == digests[4]


def test_residual_decreases():
    cfg = HeatdisConfig(rows=16, cols=16, iterations=2, ranks=2)
    r2, rt = run_heatdis(cfg, seed=1)
    rt.close()
    cfg = HeatdisConfig(rows=16, cols=16, iterations=40, ranks=2)
    r40, rt = run_heatdis(cfg, seed=1)
    rt.close()
    assert 0 < r40.residual < r2.residual


def test_transparent_restart_digest_equality(tmp_path):
    base = HeatdisConfig(rows=32, cols=32, iterations=30, ranks=4)
    ref, rt = run_heatdis(base, seed=9)
    rt.close()

    cfg = HeatdisConfig(rows=32, cols=32, iterations=30, ranks=4,
                        ckpt_every=10, ckpt_mode="transparent")
    plan = FaultPlan(step=17, victims={0, 1, 2, 3})
    killed, rt = run_heatdis(cfg, seed=9, ckpt_dir=str(tmp_path),
                             net_option="mixed", fault_plan=plan)
    assert killed.outcome.status == "killed"
    import os

    from mcr.ckpt_transparent import epoch_dir
    manifest = os.path.join(epoch_dir(str(tmp_path), rt.job_id, 1), "manifest.txt")
    rt.close()

    resumed, rt2 = resume_heatdis(manifest)
    assert resumed.outcome.status == "completed"
    assert resumed.digest == ref.digest
    restarts = [v for (r, k), v in resumed.outcome.results.items()
                if k == "ckpt@10"]
    assert restarts == ["RESTART"] * 4
    rt2.close()


def test_transparent_checkpoint_without_kill_matches(tmp_path):
    base = HeatdisConfig(rows=16, cols=16, iterations=20, ranks=2)
    ref, rt = run_heatdis(base, seed=2)
    rt.close()
    cfg = HeatdisConfig(rows=16, cols=16, iterations=20, ranks=2,
                        ckpt_every=7, ckpt_mode="transparent")
    out, rt = run_heatdis(cfg, seed=2, ckpt_dir=str(tmp_path), net_option="mixed")
    assert out.outcome.status == "completed"
    assert out.digest == ref.digest
    rt.close()


@pytest.mark.parametrize("level,victims", [(2, {1}), (3, {1, 2}), (4, {0, 1, 2})])
def test_multilevel_recovery_digest(tmp_path, level, victims):
    from mcr.ckpt_multilevel import GroupConfig

    group = GroupConfig(4, 2)
    base = HeatdisConfig(rows=32, cols=16, iterations=24, ranks=8)
    ref, rt = run_heatdis(base, seed=4)
    rt.close()

    cfg = HeatdisConfig(rows=32, cols=16, iterations=24, ranks=8,
                        ckpt_every=8, ckpt_mode=f"l{level}")
    plan = FaultPlan(step=20, victims=victims)
    crashed, rt = run_heatdis(cfg, seed=4, ckpt_dir=str(tmp_path),
                              fault_plan=plan, group=group)
    assert crashed.outcome.status == "killed"
    rt.close()

    recovered, rt2 = run_heatdis(cfg, seed=4, ckpt_dir=str(tmp_path),
                                 recover_level=level, group=group)
    assert recovered.outcome.status == "completed"
    assert recovered.digest == ref.digest
    rt2.close()


def test_fault_plan_validation():
    with pytest.raises(InvalidStep):
        FaultPlan(step=30, victims={1}, iterations=20)
    with pytest.raises(InvalidStep):
        FaultPlan(step=5, victims=set())


def test_two_tasks_per_process_digest_matches(tmp_path):
    base = HeatdisConfig(rows=32, cols=16, iterations=10, ranks=8)
    ref, rt = run_heatdis(base, seed=6)
    rt.close()
    packed, rt2 = run_heatdis(base, seed=6, tasks_per_process=2)
    assert packed.digest == ref.digest
    rt2.close()


def test_multilevel_helper_mode_digest(tmp_path):
    from mcr.ckpt_multilevel import GroupConfig

    group = GroupConfig(4, 2)
    base = HeatdisConfig(rows=32, cols=16, iterations=16, ranks=8)
    ref, rt = run_heatdis(base, seed=15)
    rt.close()

    cfg = HeatdisConfig(rows=32, cols=16, iterations=16, ranks=8,
                        ckpt_every=5, ckpt_mode="l3")
    out, rt2 = run_heatdis(cfg, seed=15, ckpt_dir=str(tmp_path),
                           helper_mode="helper_task", group=group)
    assert out.outcome.status == "completed"
    assert out.digest == ref.digest
    rt2.close()

    # crash after the last checkpoint, recover from what helpers replicated
    from mcr.faults import FaultPlan

    plan = FaultPlan(step=12, victims={3, 6})
    crashed, rt3 = run_heatdis(cfg, seed=15, ckpt_dir=str(tmp_path / "b"),
                               helper_mode="helper_task", group=group,
                               fault_plan=plan)
    assert crashed.outcome.status == "killed"
    rt3.close()
    rec, rt4 = run_heatdis(cfg, seed=15, ckpt_dir=str(tmp_path / "b"),
                           recover_level=3, group=group)
    assert rec.digest == ref.digest
    rt4.close()


def test_multiple_lanes_spread_tasks(tmp_path):
    base = HeatdisConfig(rows=32, cols=16, iterations=10, ranks=8)
    ref, rt = run_heatdis(base, seed=16)
    rt.close()

    from mcr.config import JobSpec
    from mcr.heatdis import heatdis_app
    from mcr.runtime import Runtime
    from mcr.sched import CostModel

    spec = JobSpec(n_processes=4, tasks_per_process=2, lanes_per_process=2,
                   seed=16, cost_model=CostModel(), net_option="mixed")
    rt2 = Runtime(spec)
    rt2.start()
    app = heatdis_app(base)
    for rank in range(8):
        rt2.spawn_app(rank, app)
    out = rt2.run()
    assert out.status == "completed"
    # the two tasks of each process run on distinct lanes
    for proc in rt2.procs:
        lanes = {t.lane.id for t in proc.sched.tasks.values()}
        assert lanes == {0, 1}
    assert out.results[(0, "digest")] == ref.digest
    rt2.close()
