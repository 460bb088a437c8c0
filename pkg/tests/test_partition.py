import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from fedcollab.core_model import (
    ModelSpec,
    TrainConfig,
    init_params,
    local_train,
    predict,
)
from fedcollab.partition import (
    Dataset,
    PartitionError,
    PartitionPlan,
    label_distribution,
    load_plan,
    make_partition,
    make_synthetic_corpus,
    mean_label_tv_distance,
    partition_by_repository,
    partition_label_imbalanced,
    partition_quantity_imbalanced,
    partition_uniform,
    save_plan,
    select_single_client,
    train_eval_split,
)


def _corpus(n, num_classes=2, owners=None, seed=0):
    rng = np.random.default_rng(seed)
    labels = np.arange(n) % num_classes
    rng.shuffle(labels)
    owners = owners or tuple(f"o{i % 7}" for i in range(n))
    return Dataset(rng.normal(size=(n, 3)), labels, owners, num_classes)


def _check_plan(plan: PartitionPlan, data: Dataset):
    idx = plan.all_indices()
    assert len(idx) == len(set(idx))
    assert all(0 <= i < len(data) for i in idx)
    assert all(plan.sizes())


def test_uniform_divisible():
    data = _corpus(1000)
    plan = partition_uniform(data, 10, seed=1)
    assert plan.sizes() == [100] * 10
    _check_plan(plan, data)


def test_uniform_remainder():
    plan = partition_uniform(_corpus(1001), 10, seed=1)
    assert sorted(plan.sizes()) == [100] * 9 + [101]


def test_uniform_balanced_labels():
    data = _corpus(1000)
    plan = partition_uniform(data, 10, seed=3)
    for idx in plan.assignments.values():
        assert 0.45 <= label_distribution(data, idx)[0] <= 0.55


def test_uniform_too_few_examples():
    with pytest.raises(PartitionError):
        partition_uniform(_corpus(5), 10, seed=0)


def test_label_imbalanced_huge_alpha_is_uniform():
    data = _corpus(2000, num_classes=3)
    glob = data.label_counts() / len(data)
    plan = partition_label_imbalanced(data, 10, alpha=1e6, seed=0)
    for idx in plan.assignments.values():
        assert np.all(np.abs(label_distribution(data, idx) - glob) <= 0.02)


def test_label_imbalanced_small_alpha_skews():
    data = _corpus(2000)
    plan = partition_label_imbalanced(data, 10, alpha=0.1, seed=0)
    assert max(label_distribution(data, idx).max() for idx in plan.assignments.values()) > 0.8
    _check_plan(plan, data)


@pytest.mark.parametrize("alpha", [0.05, 0.1, 1.0, 100.0])
def test_label_imbalanced_sizes_similar(alpha):
    data = _corpus(1003, num_classes=4)
    sizes = np.array(partition_label_imbalanced(data, 10, alpha, seed=4).sizes())
    assert sizes.max() <= 1.1 * sizes.mean() and sizes.min() >= 0.9 * sizes.mean()
    assert sizes.sum() == 1003


def test_label_imbalanced_small_class_rejected():
    labels = np.array([0] * 50 + [1] * 3)
    data = Dataset(np.zeros((53, 2)), labels, ("o",) * 53, 2)
    with pytest.raises(PartitionError):
        partition_label_imbalanced(data, 10, 0.5, seed=0)


def test_label_imbalance_monotone_in_alpha():
    data = _corpus(2000, num_classes=4)
    for seed in range(5):
        skewed = mean_label_tv_distance(data, partition_label_imbalanced(data, 10, 0.1, seed))
        flat = mean_label_tv_distance(data, partition_label_imbalanced(data, 10, 1e6, seed))
        assert skewed > flat


def test_quantity_two_clients_closed_form():
    plan = partition_quantity_imbalanced(_corpus(400), 2, 3.0, seed=0)
    assert sorted(plan.sizes()) == [100, 300]


def test_quantity_geometric_and_label_consistent():
    data = _corpus(3000, num_classes=3)
    plan = partition_quantity_imbalanced(data, 10, 4.0, seed=2)
    sizes = plan.sizes()
    assert round(max(sizes) / min(sizes)) == 4
    glob = data.label_counts() / len(data)
    for idx in plan.assignments.values():
        assert np.all(np.abs(label_distribution(data, idx) - glob) <= 0.05)
    _check_plan(plan, data)


def test_quantity_rejects_bad_ratio_and_infeasible():
    with pytest.raises(PartitionError):
        partition_quantity_imbalanced(_corpus(400), 2, 1.0, seed=0)
    with pytest.raises(PartitionError):
        partition_quantity_imbalanced(_corpus(30, num_classes=3), 10, 50.0, seed=0)


def test_by_repository_greedy_example():
    owners = ("a",) * 5 + ("b",) * 5 + ("c",) * 90
    data = _corpus(100, owners=owners)
    for seed in range(10):
        plan = partition_by_repository(data, 2, seed)
        by_owner = {o: {cid for cid, idx in plan.assignments.items() for i in idx if owners[i] == o} for o in "abc"}
        assert all(len(v) == 1 for v in by_owner.values())
        (c_client,) = by_owner["c"]
        assert len(plan.assignments[c_client]) == 90
        assert by_owner["a"] == by_owner["b"] != by_owner["c"]


def test_by_repository_one_owner_per_client():
    owners = ("x",) * 4 + ("y",) * 9 + ("z",) * 2
    plan = partition_by_repository(_corpus(15, owners=owners), 3, seed=5)
    for idx in plan.assignments.values():
        assert len({owners[i] for i in idx}) == 1


def test_by_repository_too_few_owners():
    with pytest.raises(PartitionError):
        partition_by_repository(_corpus(20, owners=("a",) * 10 + ("b",) * 10), 3, seed=0)


def test_by_repository_purity_on_synthetic():
    data = make_synthetic_corpus(n_examples=2000, n_owners=40, seed=3)
    plan = partition_by_repository(data, 10, seed=3)
    plan.validate_against(data)
    owner_clients = {}
    for cid, idx in plan.assignments.items():
        for i in idx:
            owner_clients.setdefault(data.owners[i], set()).add(cid)
    assert all(len(c) == 1 for c in owner_clients.values())


def test_single_client():
    data = _corpus(1000)
    assert list(select_single_client(data, 1.0, 0).assignments[0]) == list(range(1000))
    plan = select_single_client(data, 0.1, 0)
    assert plan.n_clients == 1 and len(set(plan.assignments[0])) == 100
    assert select_single_client(data, 0.1, 1).assignments != plan.assignments
    with pytest.raises(PartitionError):
        select_single_client(_corpus(4), 0.1, 0)


@settings(max_examples=30, deadline=None)
@given(
    n=st.integers(40, 400),
    n_clients=st.integers(2, 8),
    strategy=st.sampled_from(["uniform", "label_imbalanced", "quantity_imbalanced", "by_repository"]),
    seed=st.integers(0, 10_000),
)
def test_plans_disjoint_valid_deterministic(n, n_clients, strategy, seed):
    data = _corpus(n, num_classes=2, owners=tuple(f"o{i % 13}" for i in range(n)), seed=seed)
    params = {"n_clients": n_clients, "alpha": 0.3, "size_ratio": 2.0}
    try:
        plan = make_partition(data, strategy, seed, **params)
    except PartitionError:
        return
    _check_plan(plan, data)
    plan.validate_against(data)
    assert make_partition(data, strategy, seed, **params) == plan


def test_plan_validation():
    with pytest.raises(ValueError):
        PartitionPlan("uniform", {0: (1, 2), 1: (2, 3)}, 0)
    with pytest.raises(ValueError):
        PartitionPlan("uniform", {0: (1,), 1: ()}, 0)
    with pytest.raises(ValueError):
        PartitionPlan("uniform", {0: (5,)}, 0).validate_against(_corpus(3))


def test_plan_file_round_trip(tmp_path):
    plan = partition_label_imbalanced(_corpus(300), 4, 0.5, seed=9)
    save_plan(tmp_path / "plan.json", plan)
    assert load_plan(tmp_path / "plan.json") == plan


def test_synthetic_corpus_properties():
    data = make_synthetic_corpus(n_examples=300, n_owners=1, seed=0)
    assert len(set(data.owners)) == 1
    tight = make_synthetic_corpus(n_examples=400, feature_dim=5, num_classes=2, n_owners=3, cluster_spread=0.0, seed=1)
    for owner in set(tight.owners):
        for c in range(2):
            rows = tight.features[[i for i in range(len(tight)) if tight.owners[i] == owner and tight.labels[i] == c]]
            if len(rows):
                assert np.all(rows == rows[0])
    again = make_synthetic_corpus(n_examples=300, seed=5)
    assert np.array_equal(again.features, make_synthetic_corpus(n_examples=300, seed=5).features)


def test_synthetic_default_corpus_linearly_learnable():
    data = make_synthetic_corpus(seed=11)
    train_idx, test_idx = train_eval_split(len(data), 0.2, seed=11)
    spec = ModelSpec("logistic_regression", data.feature_dim, data.num_classes)
    params, _ = local_train(spec, init_params(spec, 0), data.subset(train_idx), TrainConfig(epochs=10, seed=0))
    test = data.subset(test_idx)
    assert np.mean(predict(spec, params, test.features) == test.labels) >= 0.8


def test_train_eval_split_disjoint():
    train, ev = train_eval_split(100, 0.2, seed=0)
    assert len(ev) == 20 and not set(train) & set(ev) and len(train) + len(ev) == 100
