"""Acceptance suite: one test per criterion, each printing a PASS line and
enforcing its stated runtime bound. Run with `pytest tests/test_acceptance.py -v -s`.
"""

import itertools
import os
import random
import time

import numpy as np
import pytest

from mcr import gf256
from mcr.ckpt_multilevel import GroupConfig
from mcr.ckpt_transparent import decode_image, epoch_dir, overhead
from mcr.cli import main as cli_main
from mcr.commbench import CommBenchConfig, resume_comm_bench, run_comm_bench
from mcr.config import JobSpec
from mcr.errors import InsufficientShards, Unrecoverable
from mcr.faults import FaultPlan
from mcr.heatdis import HeatdisConfig, resume_heatdis, run_heatdis
from mcr.runtime import Runtime, RuntimeOptions, TaskSpec
from mcr.sched import CostModel
from mcr.signaling import chain_views, greedy_path


class Timer:
    def __init__(self, budget_s):
        self.budget = budget_s

    def __enter__(self):
        self.t0 = time.monotonic()
        return self

    def __exit__(self, *exc):
        self.elapsed = time.monotonic() - self.t0
        if exc[0] is None:
            assert self.elapsed < self.budget, \
                f"criterion exceeded its {self.budget}s budget: {self.elapsed:.1f}s"


def _ok(n, name, timer):
    print(f"ACCEPTANCE {n} {name}: PASS ({timer.elapsed:.2f}s)")


def test_criterion_1_budget_algebra(capsys):
    with Timer(1.0) as t:
        assert cli_main(["budget", "--tc", "60", "--overhead", "0.01"]) == 0
        out = capsys.readouterr().out
        assert "tau_seconds=6000" in out.splitlines()[-1]
        for ts in (1.0, 123.0, 86400.0):
            _, ovh = overhead(ts, 60, 6000)
            assert abs(ovh - 1.01) < 1e-12
    with capsys.disabled():
        _ok(1, "budget algebra", t)


def test_criterion_2_transparent_restart_equivalence(tmp_path):
    with Timer(30.0) as t:
        base = HeatdisConfig(rows=64, cols=64, iterations=100, ranks=8)
        ref, rt = run_heatdis(base, seed=42, tasks_per_process=2,
                              net_option="mixed")
        rt.close()
        assert ref.outcome.status == "completed"

        cfg = HeatdisConfig(rows=64, cols=64, iterations=100, ranks=8,
                            ckpt_every=50, ckpt_mode="transparent")
        plan = FaultPlan(step=60, victims={0, 1, 2, 3})
        killed, rt = run_heatdis(cfg, seed=42, tasks_per_process=2,
                                 ckpt_dir=str(tmp_path), net_option="mixed",
                                 fault_plan=plan)
        assert killed.outcome.status == "killed"
        manifest = os.path.join(epoch_dir(str(tmp_path), rt.job_id, 1),
                                "manifest.txt")
        rt.close()

        resumed, rt2 = resume_heatdis(manifest)
        assert resumed.outcome.status == "completed"
        assert resumed.digest == ref.digest  # byte-identical final grid
        rt2.close()
    _ok(2, "transparent restart equivalence", t)


def test_criterion_3_two_level_protocol(tmp_path):
    import json

    def tiny_app():
        def body(api, st):
            yield from api.compute(1 + api.rank)
            result = yield from api.checkpoint()
            api.report("state", result.name)

        return TaskSpec(body=body,
                        make_state=lambda api: {},
                        save=lambda s: json.dumps(s).encode(),
                        load=lambda b: json.loads(b))

    with Timer(60.0) as t:
        rng = random.Random(2026)
        for trial in range(50):
            seed = rng.getrandbits(64)
            spec = JobSpec(n_processes=4, tasks_per_process=2, seed=seed,
                           cost_model=CostModel(ctx_switch=rng.randint(0, 3)),
                           ckpt_dir=str(tmp_path / f"trial{trial}"))
            rt = Runtime(spec)
            rt.start()
            app = tiny_app()
            for rank in range(8):
                rt.spawn_app(rank, app)
            out = rt.run()
            assert out.status == "completed"
            writers = rt.trace.select("image_write")
            assert len(writers) == 4, "one image writer per process"
            assert {e.process for e in writers} == {0, 1, 2, 3}
            states = {v for (r, k), v in out.results.items() if k == "state"}
            assert states == {"CHECKPOINT"}, "identical CkptState across tasks"
            rt.close()
    _ok(3, "two-level protocol", t)


def test_criterion_4_rail_closing_semantics(tmp_path):
    with Timer(30.0) as t:
        cfg = CommBenchConfig(sizes=(64, 1024, 65536), ranks=4, rounds=3,
                              with_checkpoint=True)
        plan = FaultPlan(step=cfg.rounds + 1, victims={0, 1, 2, 3})
        killed, rt = run_comm_bench(cfg, seed=11, ckpt_dir=str(tmp_path),
                                    fault_plan=plan)
        assert killed.outcome.status == "killed"
        job_id = rt.job_id
        net = rt.net
        rt.close()

        # Image scan: zero endpoints of non-checkpointable rails.
        ed = epoch_dir(str(tmp_path), job_id, 1)
        for p in range(4):
            with open(os.path.join(ed, f"rank-{p}.img"), "rb") as f:
                img = decode_image(f.read())
            for rail, remote, static in img["endpoints"]:
                assert net.rail(rail).checkpointable, \
                    f"non-checkpointable rail {rail} leaked into image"

        resumed, rt2 = resume_comm_bench(os.path.join(ed, "manifest.txt"))
        assert resumed.outcome.status == "completed"
        # Reconnects equal the dynamic-route census taken pre-checkpoint.
        assert resumed.census_pre == 2
        assert rt2.reconnects == resumed.census_pre
        # Post-restart steady-state latency is exactly the pre-checkpoint one.
        for row in resumed.rows:
            assert row["post"] == row["pre"], row
        rt2.close()
    _ok(4, "rail-closing semantics", t)


def test_criterion_5_routing_exhaustive():
    with Timer(60.0) as t:
        for n in range(2, 65):
            views = chain_views(n)
            for s in range(n):
                for tt in range(n):
                    if s == tt:
                        continue
                    hops = len(greedy_path(s, tt, views)) - 1
                    assert hops == abs(s - tt)
        rng = random.Random(64)
        for n in (16, 32, 64):
            views = chain_views(n)
            for _ in range(20):
                a, b = rng.sample(range(n), 2)
                views[a].neighbors.add(b)
                views[b].neighbors.add(a)
            for s in range(n):
                for tt in range(n):
                    if s == tt:
                        continue
                    hops = len(greedy_path(s, tt, views)) - 1  # NoProgress fails here
                    assert hops <= abs(s - tt)
    _ok(5, "routing", t)


def test_criterion_6_erasure_coding():
    with Timer(120.0) as t:
        # GF oracle: shift-and-xor carry-less multiply reduced mod 0x11D.
        def clmul_mod(a, b, poly=0x11D):
            r = 0
            while b:
                if b & 1:
                    r ^= a
                b >>= 1
                a <<= 1
                if a & 0x100:
                    a ^= poly
            return r

        assert clmul_mod(0x02, 0x87) == 0x13
        assert gf256.gf_mul(0x02, 0x87) == 0x13

        rng = np.random.default_rng(1234)
        for k in range(1, 9):
            for m in range(0, 9 - k):
                survivor_sets = list(itertools.combinations(range(k + m), k))
                matrices = {s: gf256.decode_matrix(list(s), k, m)
                            for s in survivor_sets}
                for _ in range(100):
                    blobs = [rng.integers(0, 256, 64, dtype=np.uint8).tobytes()
                             for _ in range(k)]
                    parity = gf256.rs_encode(blobs, m)
                    shards = list(blobs) + parity
                    for surv in survivor_sets:
                        mat = matrices[surv]
                        stacked = np.frombuffer(
                            b"".join(shards[i] for i in surv),
                            dtype=np.uint8).reshape(k, 64)
                        decoded = gf256.gf_matmul(mat, stacked)
                        assert decoded.tobytes() == b"".join(blobs)
                # every (m+1)-loss pattern leaves k-1 shards: undecodable
                lost = set(range(m + 1))
                left = {i: shards[i] for i in range(k + m) if i not in lost}
                with pytest.raises(InsufficientShards):
                    gf256.rs_decode(left, k, m)
    _ok(6, "erasure coding", t)


def test_criterion_7_multilevel_recovery(tmp_path):
    with Timer(60.0) as t:
        group = GroupConfig(4, 2)
        base = HeatdisConfig(rows=32, cols=16, iterations=24, ranks=8)
        ref, rt = run_heatdis(base, seed=20)
        ref_digest = ref.digest
        rt.close()

        def crash_then_recover(level, victims, label):
            d = tmp_path / label
            cfg = HeatdisConfig(rows=32, cols=16, iterations=24, ranks=8,
                                ckpt_every=8, ckpt_mode=f"l{level}")
            plan = FaultPlan(step=20, victims=victims)
            crashed, rt = run_heatdis(cfg, seed=20, ckpt_dir=str(d),
                                      fault_plan=plan, group=group)
            assert crashed.outcome.status == "killed"
            rt.close()
            out, rt2 = run_heatdis(cfg, seed=20, ckpt_dir=str(d),
                                   recover_level=level, group=group)
            rt2.close()
            return out

        # kill 1 -> partner copy recovers
        out = crash_then_recover(2, {1}, "l2")
        assert out.outcome.status == "completed" and out.digest == ref_digest

        # kill 2 in one (4,2) group -> RS reconstruction recovers
        out = crash_then_recover(3, {1, 2}, "l3")
        assert out.outcome.status == "completed" and out.digest == ref_digest

        # kill 3 -> beyond parity: unrecoverable without an L4 copy
        d = tmp_path / "l3fail"
        cfg = HeatdisConfig(rows=32, cols=16, iterations=24, ranks=8,
                            ckpt_every=8, ckpt_mode="l3")
        plan = FaultPlan(step=20, victims={0, 1, 2})
        crashed, rt = run_heatdis(cfg, seed=20, ckpt_dir=str(d),
                                  fault_plan=plan, group=group)
        rt.close()
        failed, rt2 = run_heatdis(cfg, seed=20, ckpt_dir=str(d),
                                  recover_level=3, group=group)
        assert failed.outcome.status == "aborted"
        assert any(isinstance(e, Unrecoverable)
                   for e in failed.outcome.failures.values())
        rt2.close()

        # same kill with an L4 copy -> shared store recovers
        out = crash_then_recover(4, {0, 1, 2}, "l4")
        assert out.outcome.status == "completed" and out.digest == ref_digest
    _ok(7, "multilevel recovery", t)


def test_criterion_8_oversubscription_property(tmp_path):
    from mcr.ckpt_multilevel import fti_init

    L1_COST = 100.0   # 100-byte region at local_write_per_byte=1
    W = 150.0         # helper work: net 50 + partner write 100
    B = 200.0         # app blocked window

    def run_variant(label, mode, io_yield, with_ckpt=True):
        cost = CostModel(local_write_per_byte=1, net_per_byte=0.5,
                         encode_per_byte=1, ctx_switch=0)
        spec = JobSpec(n_processes=4, tasks_per_process=1, seed=5,
                       cost_model=cost, ckpt_dir=str(tmp_path / label),
                       net_option="fti_mix")
        rt = Runtime(spec, options=RuntimeOptions(io_yield=io_yield))
        rt.start()
        fti_init(rt, GroupConfig(4, 0), mode)
        finish = {}

        def app(api, st):
            data = bytearray(100)
            api.protect(0, data)
            yield from api.compute(300)
            if with_ckpt:
                yield from api.checkpoint_app(1, 2)
            yield from api.wait(B)
            yield from api.compute(300)
            finish["app"] = api.now

        rt.spawn_app(0, TaskSpec(body=app))

        def idle(api, st):
            yield from api.compute(1)

        for rank in range(1, 4):
            rt.spawn_app(rank, TaskSpec(body=idle))
        out = rt.run()
        assert out.status == "completed", out.failures
        rt.close()
        return finish["app"]

    with Timer(10.0) as t:
        base = run_variant("base", "inline", True, with_ckpt=False)
        helper_on = run_variant("hon", "helper_task", True)
        helper_off = run_variant("hoff", "helper_task", False)
        inline = run_variant("inl", "inline", True)

        assert base == 300 + B + 300
        assert helper_on == base + L1_COST          # exactly the L1 cost
        assert helper_on < inline                   # strictly better than inline
        assert inline == base + L1_COST + W         # nothing hidden inline
        assert helper_off >= helper_on              # limited gains without io_yield
    _ok(8, "oversubscription property", t)


def test_criterion_9_determinism(tmp_path, capsys):
    def one_run(label, i):
        out = str(tmp_path / f"{label}{i}")
        rc = cli_main(["run", "--bench", "heatdis", "--np", "4", "--rows",
                       "32", "--cols", "32", "--iterations", "20",
                       "--ckpt-mode", "transparent", "--ckpt-every", "10",
                       "--net", "mixed", "--seed", "77", "--out", out])
        assert rc == 0
        stdout = capsys.readouterr().out
        digest = [l for l in stdout.splitlines() if l.startswith("digest=")][0]
        files = {}
        for name in ("heatdis.csv", "overhead_breakdown.csv"):
            with open(os.path.join(out, name), "rb") as f:
                files[name] = f.read()
        return digest, files

    def one_comm(label, i):
        out = str(tmp_path / f"{label}{i}")
        rc = cli_main(["run", "--bench", "comm", "--np", "4", "--rounds", "3",
                       "--ckpt-mode", "transparent", "--seed", "78",
                       "--out", out])
        assert rc == 0
        capsys.readouterr()
        files = {}
        for name in ("comm_latency.csv", "comm_summary.csv"):
            with open(os.path.join(out, name), "rb") as f:
                files[name] = f.read()
        return files

    with Timer(60.0) as t:
        first_digest, first_files = one_run("h", 0)
        for i in range(1, 10):
            digest, files = one_run("h", i)
            assert digest == first_digest
            assert files == first_files
        first_comm = one_comm("c", 0)
        for i in range(1, 10):
            assert one_comm("c", i) == first_comm
    with capsys.disabled():
        _ok(9, "determinism", t)
