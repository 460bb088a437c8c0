import json
from dataclasses import replace

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from fedcollab.aggregation import ClientUpdate, aggregate_fedavg
from fedcollab.core_model import (
    LayoutError,
    ModelSpec,
    TrainConfig,
    init_params,
    load_checkpoint,
    local_train,
    zeros_like_spec,
)
from fedcollab.governance import (
    GateConfig,
    GateError,
    Ledger,
    Registry,
    RegistryCorruption,
    RegistryError,
    RegistryExists,
    StaleBaseError,
    award_tokens,
    fold_balances,
    history,
    registry_init,
)
from fedcollab.partition import make_synthetic_corpus, save_dataset

SPEC = ModelSpec("logistic_regression", 6, 2)
TRAIN = TrainConfig(epochs=5, seed=0)


def _clock():
    ticks = iter(range(10**6))
    return lambda: f"2024-01-01T00:00:{next(ticks):02d}+00:00"


@pytest.fixture(scope="module")
def corpus():
    return make_synthetic_corpus(n_examples=1200, feature_dim=6, num_classes=2, n_owners=6, seed=2)


@pytest.fixture
def setup(tmp_path, corpus):
    bench = corpus.subset(range(300))
    save_dataset(tmp_path / "bench.json", bench)
    genesis, _ = local_train(SPEC, init_params(SPEC, 0), corpus.subset(range(300, 600)), TRAIN)
    gate = GateConfig(str(tmp_path / "bench.json"), "accuracy", min_score=0.7, regression_tolerance=0.02)
    reg = registry_init(tmp_path / "reg", SPEC, genesis, gate, genesis_examples=300, clock=_clock())
    return reg, corpus, genesis


def _trained(reg, corpus, lo, hi, seed=1):
    return local_train(SPEC, reg.params(), corpus.subset(range(lo, hi)), replace(TRAIN, seed=seed))[0]


def _merge(reg, who, params, n):
    cid = reg.submit(who, reg.head().version_id, params, n)
    assert reg.evaluate_gate(cid)["passed"]
    return reg.decide(cid, "accept", "committee")


def test_init_single_genesis(setup, tmp_path):
    reg, _, genesis = setup
    (v,) = reg.versions()
    assert v.version_id == 0 and v.parent is None
    assert reg.params(0) == genesis
    assert load_checkpoint(reg.root / v.checkpoint_ref)[1].values.tobytes() == genesis.values.tobytes()
    with pytest.raises(RegistryExists):
        registry_init(tmp_path / "reg", SPEC, genesis, reg.gate)
    assert [v.version_id for v, _ in history(reg)] == [0]


def test_init_validation(tmp_path, corpus):
    save_dataset(tmp_path / "b.json", corpus.subset(range(50)))
    gate = GateConfig(str(tmp_path / "b.json"), "f1")
    with pytest.raises(ValueError):
        registry_init(tmp_path / "r", ModelSpec("logistic_regression", 6, 3), init_params(ModelSpec("logistic_regression", 6, 3), 0), gate)
    with pytest.raises(ValueError):
        registry_init(tmp_path / "r", SPEC, init_params(SPEC, 0), replace(gate, primary_metric="bleu4"))
    with pytest.raises(ValueError):
        GateConfig("x", regression_tolerance=-1)
    with pytest.raises(RegistryError):
        Registry(tmp_path / "nowhere")


def test_submit_pending_and_errors(setup):
    reg, corpus, _ = setup
    cid = reg.submit("alice", 0, _trained(reg, corpus, 600, 800), 200)
    c = reg.contribution(cid)
    assert c.status == "pending" and c.gate_report is None
    assert len(reg.versions()) == 1
    with pytest.raises(StaleBaseError):
        reg.submit("bob", 1, reg.params(), 5)
    with pytest.raises(LayoutError):
        reg.submit("bob", 0, init_params(ModelSpec("logistic_regression", 5, 2), 0), 5)
    with pytest.raises(ValueError):
        reg.submit("bob", 0, reg.params(), 0)


def test_stale_base_after_merge(setup):
    reg, corpus, _ = setup
    update = _trained(reg, corpus, 600, 800)
    a = reg.submit("alice", 0, update, 200)
    b = reg.submit("bob", 0, update, 200)
    assert reg.contribution(b).status == "pending"
    reg.evaluate_gate(a)
    reg.decide(a, "accept", "committee")
    with pytest.raises(StaleBaseError):
        reg.submit("carol", 0, update, 10)
    with pytest.raises(StaleBaseError):
        reg.evaluate_gate(b)
    assert reg.contribution(b).status == "pending"


def test_gated_before_merge_then_stale(setup):
    reg, corpus, _ = setup
    update = _trained(reg, corpus, 600, 800)
    a = reg.submit("alice", 0, update, 200)
    b = reg.submit("bob", 0, update, 200)
    reg.evaluate_gate(a)
    reg.evaluate_gate(b)
    reg.decide(a, "accept", "committee")
    with pytest.raises(StaleBaseError):
        reg.decide(b, "accept", "committee")


def test_identity_update_keeps_scores(setup):
    reg, _, _ = setup
    cid = reg.submit("alice", 0, reg.params(), 50)
    report = reg.evaluate_gate(cid)
    assert all(before == after for before, after in report["metrics"].values())
    assert report["passed"] == (reg.head().benchmark_scores["accuracy"] >= reg.gate.min_score)


def test_report_has_every_gate_metric(setup):
    reg, corpus, _ = setup
    cid = reg.submit("alice", 0, _trained(reg, corpus, 600, 800), 200, new_test_set=corpus.subset(range(800, 900)))
    report = reg.evaluate_gate(cid)
    assert {"accuracy", "f1", "new_test_accuracy", "new_test_f1"} <= set(report["metrics"])
    assert reg.gate.primary_metric in report["metrics"]


def test_zero_update_on_linear_model_keeps_predictions(setup):
    # argmax of a linear model is invariant to positive rescaling of all weights,
    # so a zeroed update only shrinks the head and the gate cannot see it
    reg, _, _ = setup
    cid = reg.submit("mallory", 0, zeros_like_spec(SPEC), 10**6)
    report = reg.evaluate_gate(cid)
    assert report["metrics"]["accuracy"][0] == report["metrics"]["accuracy"][1]


def test_decide_rules(setup):
    reg, corpus, _ = setup
    cid = reg.submit("alice", 0, _trained(reg, corpus, 600, 800), 200)
    with pytest.raises(GateError):
        reg.decide(cid, "accept", "committee")
    with pytest.raises(GateError):
        reg.decide(cid, "reject", "committee")
    with pytest.raises(ValueError):
        reg.decide(cid, "maybe", "committee")
    reg.evaluate_gate(cid)
    v = reg.decide(cid, "accept", "committee")
    assert v.version_id == 1 and v.parent == 0 and v.contributor == "alice"
    assert v.accumulated_examples == 500
    assert reg.contribution(cid).status == "accepted"
    assert reg.balances() == {"alice": 10}
    with pytest.raises(RegistryError):
        reg.decide(cid, "reject", "committee")
    with pytest.raises(GateError):
        reg.evaluate_gate(cid)


def test_accept_on_fail_refused_and_reject_changes_nothing(setup):
    reg, _, _ = setup
    strict = replace(reg.gate, benchmark_dataset_ref=str(reg.root / "benchmark.json"), min_score=1.01)
    reg2_root = reg.root.parent / "strict"
    reg2 = registry_init(reg2_root, SPEC, reg.params(), strict, genesis_examples=300)
    cid = reg2.submit("bob", 0, reg2.params(), 10)
    assert not reg2.evaluate_gate(cid)["passed"]
    head_bytes = (reg2.root / reg2.head().checkpoint_ref).read_bytes()
    versions_bytes = (reg2.root / "versions.jsonl").read_bytes()
    with pytest.raises(GateError):
        reg2.decide(cid, "accept", "committee")
    assert reg2.decide(cid, "reject", "committee") is None
    assert reg2.contribution(cid).status == "rejected"
    assert (reg2.root / "versions.jsonl").read_bytes() == versions_bytes
    assert (reg2.root / reg2.head().checkpoint_ref).read_bytes() == head_bytes
    assert reg2.ledger.events() == []


def test_modified_candidate_detected(setup):
    reg, corpus, _ = setup
    cid = reg.submit("alice", 0, _trained(reg, corpus, 600, 800), 200)
    report = reg.evaluate_gate(cid)
    path = reg.root / report["candidate_ref"]
    path.write_text(path.read_text().replace("0", "1", 1))
    with pytest.raises(RegistryCorruption):
        reg.decide(cid, "accept", "committee")


def test_three_merges_history_and_soundness(setup):
    reg, corpus, _ = setup
    for k, who in enumerate(["alice", "bob", "carol"]):
        _merge(reg, who, _trained(reg, corpus, 600 + 200 * k, 800 + 200 * k, seed=k), 200)
    hist = Registry(reg.root).history()
    assert [v.version_id for v, _ in hist] == [0, 1, 2, 3]
    assert hist[0][1] is None
    assert [c.contributor for _, c in hist[1:]] == ["alice", "bob", "carol"]
    for v, _ in hist[1:]:
        assert reg.reevaluate(v.version_id)["accuracy"] == v.benchmark_scores["accuracy"] >= reg.gate.min_score
    assert reg.balances() == {"alice": 10, "bob": 10, "carol": 10}


def test_merge_equals_fedavg(setup):
    reg, corpus, _ = setup
    update = _trained(reg, corpus, 600, 800)
    cid = reg.submit("alice", 0, update, 123)
    report = reg.evaluate_gate(cid)
    _, candidate = load_checkpoint(reg.root / report["candidate_ref"])
    expected = aggregate_fedavg([ClientUpdate(0, 0, reg.params(), 300), ClientUpdate(1, 0, update, 123)])
    assert candidate.values.tobytes() == expected.values.tobytes()


@settings(max_examples=15, deadline=None)
@given(head_n=st.integers(1, 10**6), claimed=st.integers(1, 10**6), seed=st.integers(0, 1000))
def test_merge_consistency_property(tmp_path_factory, corpus, head_n, claimed, seed):
    root = tmp_path_factory.mktemp("prop")
    save_dataset(root / "b.json", corpus.subset(range(100)))
    head = init_params(SPEC, seed)
    update = init_params(SPEC, seed + 1)
    reg = registry_init(root / "r", SPEC, head, GateConfig(str(root / "b.json"), min_score=0.0, regression_tolerance=1.0),
                        genesis_examples=head_n)
    report = reg.evaluate_gate(reg.submit("x", 0, update, claimed))
    _, candidate = load_checkpoint(reg.root / report["candidate_ref"])
    expected = aggregate_fedavg([ClientUpdate(0, 0, head, head_n), ClientUpdate(1, 0, update, claimed)])
    assert candidate == expected


def test_tampered_parent_detected(setup):
    reg, corpus, _ = setup
    _merge(reg, "alice", _trained(reg, corpus, 600, 800), 200)
    path = reg.root / "versions.jsonl"
    lines = path.read_text().splitlines()
    wrapped = json.loads(lines[1])
    wrapped["record"]["parent"] = 7
    lines[1] = json.dumps(wrapped, sort_keys=True)
    path.write_text("\n".join(lines) + "\n")
    with pytest.raises(RegistryCorruption, match="checksum"):
        Registry(reg.root)
    # an attacker who also recomputes the checksum still breaks the chain
    from fedcollab.governance import _canonical, _sha256

    wrapped["sha256"] = _sha256(_canonical(wrapped["record"]))
    lines[1] = json.dumps(wrapped, sort_keys=True)
    path.write_text("\n".join(lines) + "\n")
    with pytest.raises(RegistryCorruption, match="parent"):
        Registry(reg.root)


def test_tampered_checkpoint_detected(setup):
    reg, _, _ = setup
    ckpt = reg.root / "checkpoints/v0.json"
    ckpt.write_text(ckpt.read_text() + " ")
    with pytest.raises(RegistryCorruption):
        Registry(reg.root)


def test_award_tokens(setup):
    reg, corpus, _ = setup
    v = _merge(reg, "alice", _trained(reg, corpus, 600, 800), 200)
    assert reg.ledger.balance("alice") == 10
    reg.award_tokens("alice", v.contribution_id, 5)
    assert reg.ledger.balance("alice") == 15
    with pytest.raises(ValueError):
        reg.award_tokens("alice", v.contribution_id, 0)
    pending = reg.submit("bob", 1, reg.params(), 3)
    with pytest.raises(RegistryError):
        reg.award_tokens("bob", pending, 10)
    events = Registry(reg.root).ledger.events()
    assert fold_balances(events) == reg.balances() == {"alice": 15}
    assert sum(reg.balances().values()) == sum(e.tokens for e in events)


def test_standalone_ledger(tmp_path):
    ledger = Ledger(tmp_path / "ledger.jsonl")
    assert ledger.balance("a") == 0
    award_tokens(ledger, "a", 1, 10)
    award_tokens(ledger, "a", 2, 5)
    award_tokens(ledger, "b", 3, 1)
    assert ledger.balances() == {"a": 15, "b": 1}
    assert [e.seq for e in ledger.events()] == [0, 1, 2]


@settings(max_examples=40, deadline=None)
@given(st.lists(st.tuples(st.sampled_from("abcd"), st.integers(1, 1000)), max_size=30))
def test_ledger_fold_properties(awards):
    from fedcollab.governance import LedgerEvent

    events = [LedgerEvent(i, who, i, n, "r") for i, (who, n) in enumerate(awards)]
    balances = fold_balances(events)
    assert sum(balances.values()) == sum(n for _, n in awards)
    assert fold_balances(events) == balances
    assert fold_balances(events[::-1]) == balances
    assert np.all(np.array(list(balances.values()), dtype=int) > 0)


def test_registry_is_relocatable(setup, tmp_path):
    import shutil

    reg, corpus, _ = setup
    _merge(reg, "alice", _trained(reg, corpus, 600, 800), 200)
    moved = shutil.copytree(reg.root, tmp_path / "moved")
    again = Registry(moved)
    assert again.gate.benchmark_dataset_ref == "benchmark.json"
    assert again.history()[-1][0].version_id == 1
