"""Integrity schemes for the shadow region."""
from __future__ import annotations

import pytest

from shadowlab import config as C
from shadowlab import workloads
from shadowlab.attacks import Outcome, run_scenario, shadow_overwrite_scenario
from shadowlab.config import Integrity, Mapping, ShadowConfig, Validation
from shadowlab.integrity import IntegrityScheme, adjudicate_store, integrity_cost, key_bracket
from shadowlab.machine import AccessContext, FaultKind, Page
from shadowlab.runner import build, run_program

SCHEMES = [Integrity.INFO_HIDING, Integrity.KEY, Integrity.BOUNDS, Integrity.PRIV_MOVE]


def cfg_for(mapping, integrity, validation=Validation.CMP):
    return ShadowConfig(mapping, validation, integrity=integrity)


def test_key_bracket_is_eight_instructions():
    before, after = key_bracket(1)
    assert len(before) + len(after) == 8
    assert before[-1].op == "wrkperm" and after[0].op == "wrkperm"
    assert after[0].operands[0].value == 1 << 3


@pytest.mark.parametrize("mapping", list(Mapping))
def test_every_shadow_store_sits_inside_a_key_bracket(mapping):
    q = build(workloads.workload("fib"), cfg_for(mapping, Integrity.KEY))
    for f in q.functions:
        unlocked = False
        for ins in f.instructions:
            if ins.op == "wrkperm":
                unlocked = ins.operands[0].value == 0
            elif ins.attrs.get("sw"):
                assert unlocked, f"{f.name}: {ins.op} outside a bracket"


def test_bounds_checks_every_unprivileged_store():
    q = build(workloads.workload("sorter"), cfg_for(Mapping.COMPACT_REGISTER, Integrity.BOUNDS))
    for f in q.functions:
        if not (f.protected or f.runtime):
            continue
        ins = f.instructions
        for i, x in enumerate(ins):
            if x.is_store() and not x.attrs.get("sw"):
                assert [ins[i - 2].op, ins[i - 1].op] == ["bndcl", "bndcu"]


def test_priv_move_tags_shadow_stores():
    cfg = cfg_for(Mapping.PARALLEL_CONSTANT, Integrity.PRIV_MOVE)
    q = build(workloads.workload("fib"), cfg)
    tagged = [i for f in q.functions for i in f.instructions if i.attrs.get("sw")]
    assert tagged and all(i.priv == cfg.region_id for i in tagged)


def test_adjudication():
    page = Page(0x1000, key=1)
    other = Page(0x2000, key=0)
    bounds = IntegrityScheme(Integrity.BOUNDS, low=0x1000, high=0x2000)
    assert adjudicate_store(bounds, AccessContext(checked=True), 0x1000, page) is FaultKind.BOUNDS
    assert adjudicate_store(bounds, AccessContext(checked=False), 0x1000, page) is None
    assert adjudicate_store(bounds, AccessContext(checked=True), 0x2000, other) is None
    priv = IntegrityScheme(Integrity.PRIV_MOVE, region=1)
    assert adjudicate_store(priv, AccessContext(priv=0), 0x1000, page) is FaultKind.PERMISSION
    assert adjudicate_store(priv, AccessContext(priv=1), 0x1000, page) is None
    hide = IntegrityScheme(Integrity.INFO_HIDING)
    assert adjudicate_store(hide, AccessContext(), 0x1000, page) is None


@pytest.mark.parametrize("kw", [{"key": 16}, {"region": 256}, {"low": 5}])
def test_scheme_rejects_bad_parameters(kw):
    with pytest.raises(ValueError):
        IntegrityScheme(Integrity.KEY, **kw)


@pytest.mark.parametrize("integrity", SCHEMES)
@pytest.mark.parametrize("mapping", list(Mapping))
def test_schemes_are_transparent(mapping, integrity):
    cfg = cfg_for(mapping, integrity)
    for name in ("fib", "setjmp_ladder", "sorter"):
        p = workloads.workload(name)
        run = run_program(p, cfg)
        assert run.balanced, f"{name}: {run.fault or run.layout_error}"
        assert run.outputs == run_program(p, None).outputs


def test_info_hiding_places_the_region_by_seed():
    cfg = cfg_for(Mapping.COMPACT_REGISTER, Integrity.INFO_HIDING)
    p = workloads.workload("fib", 3)
    bases = {run_program(p, cfg, seed=s).machine.threads[0].shadow_lo for s in range(8)}
    assert len(bases) > 1
    assert all(C.HIDE_ZONE <= b < C.HIDE_ZONE + C.HIDE_SLOTS * C.PAGE for b in bases)
    again = run_program(p, cfg, seed=3).machine.threads[0].shadow_lo
    assert again == run_program(p, cfg, seed=3).machine.threads[0].shadow_lo


@pytest.mark.parametrize("integrity, fault", [(Integrity.KEY, "KeyDenied"),
                                              (Integrity.BOUNDS, "BoundsDenied"),
                                              (Integrity.PRIV_MOVE, "PermissionDenied")])
def test_overwrite_is_denied_with_the_scheme_fault(victim, integrity, fault):
    r = run_scenario(victim, cfg_for(Mapping.COMPACT_REGISTER, integrity), shadow_overwrite_scenario())
    assert r.outcome is Outcome.PREVENTED and r.fault == fault


def test_overwrite_without_enforcement_succeeds(victim):
    for integrity in (Integrity.NONE, Integrity.INFO_HIDING):
        r = run_scenario(victim, cfg_for(Mapping.PARALLEL_CONSTANT, integrity), shadow_overwrite_scenario())
        assert r.outcome is Outcome.HIJACKED


def test_integrity_cost_rows():
    rows = {r.scheme: r for r in integrity_cost(workloads.workload("fib", 8),
                                                 ShadowConfig(Mapping.COMPACT_REGISTER))}
    assert rows["info-hiding"].static_added == 0 and rows["info-hiding"].dynamic_added == 0
    assert rows["key"].dynamic_added > rows["bounds"].dynamic_added >= 0
    assert rows["priv-move"].static_added == 0
