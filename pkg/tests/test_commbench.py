"""Comm microbenchmark: latency phases, reconnect census, restart path."""

import os

import pytest

from mcr.commbench import (
    CommBenchConfig,
    GATE_BYTES,
    partner_of,
    resume_comm_bench,
    run_comm_bench,
)
from mcr.ckpt_transparent import epoch_dir
from mcr.faults import FaultPlan


def test_partner_assignment():
    n = 4
    assert partner_of(0, 64, n) == 1
    assert partner_of(1, 64, n) == 0
    assert partner_of(0, GATE_BYTES + 1, n) == 2
    assert partner_of(1, 65536, n) == 3
    assert partner_of(2, 65536, n) == 0
    assert partner_of(3, 65536, n) == 1


def test_no_checkpoint_flat_latency():
    cfg = CommBenchConfig(sizes=(64, 65536), ranks=4, rounds=3)
    result, rt = run_comm_bench(cfg, seed=5)
    assert result.outcome.status == "completed"
    for row in result.rows:
        assert row["pre"] == row["post"]       # flat in virtual time
        assert row["transient"] == row["pre"]  # nothing to reconnect
    # the two large-pair routes were created once during warmup
    assert result.reconnects == 2
    rt.close()


def test_checkpoint_reconnects_match_census(tmp_path):
    cfg = CommBenchConfig(sizes=(64, 65536), ranks=4, rounds=3,
                          with_checkpoint=True)
    result, rt = run_comm_bench(cfg, seed=5, ckpt_dir=str(tmp_path))
    assert result.outcome.status == "completed"
    assert result.census_pre == 2    # two dynamic routes before the ckpt
    # two initial connects + two reconnects after the rails were closed
    assert result.reconnects == 4
    for row in result.rows:
        assert row["post"] == row["pre"]   # steady state returns exactly
        # The transient round absorbs collective-exit skew for every size
        # and additionally the reconnect RPC on the gated rail.
        assert row["transient"] >= row["pre"]
        if row["size"] > GATE_BYTES:
            assert row["transient"] > row["pre"]
    rt.close()


def test_restart_reconnect_census_and_latency(tmp_path):
    cfg = CommBenchConfig(sizes=(64, 1024, 65536), ranks=4, rounds=3,
                          with_checkpoint=True)
    # Kill everyone right after the checkpoint returns (op counter: rounds
    # pre-phase ops, then the ckpt op, then the first post op = rounds + 1).
    plan = FaultPlan(step=cfg.rounds + 1, victims={0, 1, 2, 3})
    killed, rt = run_comm_bench(cfg, seed=8, ckpt_dir=str(tmp_path),
                                fault_plan=plan)
    assert killed.outcome.status == "killed"
    manifest = os.path.join(epoch_dir(str(tmp_path), rt.job_id, 1),
                            "manifest.txt")
    rt.close()

    resumed, rt2 = resume_comm_bench(manifest)
    assert resumed.outcome.status == "completed"
    # Post-restart, reconnects equal the pre-checkpoint dynamic census.
    assert rt2.reconnects == resumed.census_pre == 2
    for row in resumed.rows:
        assert row["post"] == row["pre"], row   # exact, virtual time
    rt2.close()


def test_comm_bench_config_validation():
    from mcr.config import ConfigSyntaxError

    with pytest.raises(ConfigSyntaxError):
        CommBenchConfig(ranks=3)
    with pytest.raises(ConfigSyntaxError):
        CommBenchConfig(rounds=1)
