import csv
import io
import itertools

import numpy as np
import pytest

from advlab import attacks as at
from advlab import bench
from advlab import datasets as ds
from advlab import train as tr
from advlab import zoo
from conftest import small_config


def tagged(family, seed, tag, name=None):
    model = zoo.build_classifier(small_config(family), seed, name=name or f"{family}-{tag}-{seed}")
    model.tag = tag
    return model


@pytest.fixture(scope="module")
def data():
    return ds.synth_blobs(4, 30, resolution=8, seed=0)


@pytest.fixture(scope="module")
def zoo4(data):
    # two ST and two AT models, lightly trained so predictions are not constant
    trn, val = data.split(0.25, seed=1)
    out = {}
    conf = tr.TrainConfig(optimizer="adam", initial_lr=3e-3, weight_decay=0.0, batch_size=16, max_epochs=3)
    for fam, seed in (("mlp", 0), ("small-cnn-a", 1)):
        for tag in ("ST", "AT"):
            model = tagged(fam, seed, tag, name=f"{fam}-{tag}")
            if tag == "AT":
                c = tr.TrainConfig(**{**conf.to_dict(), "free_at": tr.FreeATConfig(replay=2)})
                model = tr.train_free_at(model, trn, val, c).model
            else:
                model = tr.train_standard(model, trn, val, conf).model
            model.name = f"{fam}-{tag}"
            out[model.name] = model
    return out


@pytest.fixture(scope="module")
def sample(data):
    return ds.sample_benchmark(data, 3, seed=4)


@pytest.fixture(scope="module")
def built(zoo4, sample):
    spec = at.AttackSpec(epsilons=(16.0,), steps=4, ig_steps=4, update_sign="descend")
    return bench.build_transfer_benchmark(zoo4, sample, spec=spec)


# ---------------------------------------------------------------------------
# robustness sweep


def test_default_sweep():
    assert bench.DEFAULT_SWEEP == (1.0, 2.0, 3.0, 4.0, 5.0)
    spec = bench.default_pgd_spec()
    assert spec.steps == 20 and spec.update_sign == "ascend"


def test_sweep_zero_budget_is_clean_accuracy(zoo4, data):
    model = zoo4["mlp-ST"]
    rep = bench.eval_robustness_sweep(model, data, epsilon_list=[0.0])
    clean = float(np.mean(zoo.predict_labels(model, data.images) == data.labels))
    row = rep.rows[0]
    assert row.clean == clean and row.pgd == {0.0: clean} and row.mig == {0.0: clean}


def test_sweep_reports_each_budget(zoo4, data):
    small = data.subset(np.arange(0, 120, 6))
    pgd = at.AttackSpec(epsilons=(1.0,), steps=3, scalar="loss")
    mig = at.AttackSpec(epsilons=(1.0,), steps=3, ig_steps=3, update_sign="descend")
    rep = bench.eval_robustness_sweep(zoo4["small-cnn-a-ST"], small, pgd, mig, epsilon_list=[0, 2, 4])
    row = rep.rows[0]
    assert sorted(row.pgd) == [0.0, 2.0, 4.0] and sorted(row.mig) == [0.0, 2.0, 4.0]
    # standalone PGD at each budget, computed directly
    for e in (2.0, 4.0):
        out = at.pgd(zoo4["small-cnn-a-ST"], small.images, small.labels, at.AttackSpec(epsilons=(e,), steps=3, scalar="loss"))
        assert row.pgd[e] == 1.0 - out.success[0].mean()
    assert all(0 <= v <= 1 for v in row.mig.values())
    text = bench.robustness_csv(rep)
    assert text.splitlines()[0] == "model,family,tag,n,clean,pgd_0,pgd_2,pgd_4,mig_0,mig_2,mig_4"


def test_random_model_near_chance():
    data = ds.synth_blobs(4, 100, resolution=8, seed=3)
    model = zoo.build_classifier(small_config("mlp"), 9)
    rep = bench.eval_robustness_sweep(model, data, epsilon_list=[0.0], mig=False)
    assert abs(rep.rows[0].clean - 0.25) < 0.15


def test_sweep_errors(zoo4, data):
    m = zoo4["mlp-ST"]
    with pytest.raises(ValueError):
        bench.eval_robustness_sweep(m, data, epsilon_list=[])
    with pytest.raises(ValueError):
        bench.eval_robustness_sweep(m, data, epsilon_list=[2.0, 1.0])
    empty = ds.BenchmarkSample(data.images[:0], data.labels[:0], 1, 0, np.zeros(0, dtype=np.int64))
    with pytest.raises(ValueError):
        bench.eval_robustness_sweep(m, empty, epsilon_list=[0.0])


def test_merge_reports(zoo4, data):
    a = bench.eval_robustness_sweep(zoo4["mlp-ST"], data, epsilon_list=[0.0])
    b = bench.eval_robustness_sweep(zoo4["mlp-AT"], data, epsilon_list=[0.0])
    assert [r.model for r in bench.merge_reports([a, b]).rows] == ["mlp-ST", "mlp-AT"]
    c = bench.eval_robustness_sweep(zoo4["mlp-AT"], data, epsilon_list=[0.0, 1.0], mig=False)
    with pytest.raises(ValueError):
        bench.merge_reports([a, c])


# ---------------------------------------------------------------------------
# benchmark construction


def test_benchmark_cardinality_and_ball(built, sample, zoo4):
    assert set(built.adversarial) == set(zoo4)
    assert len(built) == len(sample) == 12
    for adv in built.adversarial.values():
        assert adv.shape == sample.images.shape
        assert np.all(np.abs(adv.astype(np.float64) - sample.images) <= 16.0 + 1e-4)
        assert adv.min() >= 0 and adv.max() <= 255
    assert built.manifest["epsilon"] == 16.0 and built.manifest["n"] == 12
    assert built.manifest["surrogates"]["mlp-AT"] == {"family": "mlp", "tag": "AT"}


def test_building_queries_no_target(zoo4, sample):
    # targets are never touched while crafting; only surrogate forwards run
    calls = {k: 0 for k in zoo4}
    wrapped = {}
    for k, m in zoo4.items():
        c = m.copy()
        orig = c.forward

        def fwd(*a, _k=k, _orig=orig, **kw):
            calls[_k] += 1
            return _orig(*a, **kw)

        c.forward = fwd
        wrapped[k] = c
    spec = at.AttackSpec(epsilons=(16.0,), steps=1, ig_steps=1, update_sign="descend")
    bench.build_transfer_benchmark({"mlp-ST": wrapped["mlp-ST"]}, sample, spec=spec)
    assert calls["mlp-ST"] > 0
    assert all(calls[k] == 0 for k in calls if k != "mlp-ST")


def test_surrogate_class_mismatch(zoo4, sample):
    odd = zoo.build_classifier(small_config("mlp", classes=5), 0, name="odd")
    with pytest.raises(ValueError):
        bench.build_transfer_benchmark({"a": zoo4["mlp-ST"], "odd": odd}, sample)
    with pytest.raises(ValueError):
        bench.build_transfer_benchmark({}, sample)


def test_benchmark_persistence_round_trip(built, tmp_path):
    bench.save_transfer_benchmark(built, tmp_path)
    loaded = bench.load_transfer_benchmark(tmp_path)
    assert loaded.images.tobytes() == built.images.tobytes()
    assert loaded.labels.tolist() == built.labels.tolist()
    for k in built.adversarial:
        assert loaded.adversarial[k].tobytes() == built.adversarial[k].tobytes()
    assert loaded.surrogate_meta == built.surrogate_meta
    assert loaded.epsilon == 16.0 and loaded.class_count == 4


# ---------------------------------------------------------------------------
# transfer matrix


def brute_force_matrix(bench_, targets):
    sids, tids = sorted(bench_.adversarial), sorted(targets)
    acc = np.zeros((len(sids), len(tids)))
    for i, s in enumerate(sids):
        for j, t in enumerate(tids):
            hits = 0
            for k in range(len(bench_.labels)):
                logits, _ = zoo.predict(targets[t], bench_.adversarial[s][k : k + 1])
                hits += int(np.argmax(logits[0]) == bench_.labels[k])
            acc[i, j] = hits / len(bench_.labels)
    return acc


def test_matrix_matches_per_image_oracle(built, zoo4):
    m = bench.eval_transfer_matrix(built, zoo4)
    np.testing.assert_array_equal(m.accuracy, brute_force_matrix(built, zoo4))
    assert m.surrogates == m.targets == sorted(zoo4)
    np.testing.assert_array_equal(m.whitebox, np.eye(4, dtype=bool))
    assert np.all(m.n == 12)


def test_clean_set_as_adversarial_gives_clean_accuracy(built, zoo4):
    fake = bench.TransferBenchmark(
        built.images, built.labels, 4, 16.0, {"mlp-ST": built.images.copy()}, {"mlp-ST": {"family": "mlp", "tag": "ST"}}
    )
    m = bench.eval_transfer_matrix(fake, zoo4)
    for t in m.targets:
        assert m.cell("mlp-ST", t) == m.clean[t]


def test_target_class_mismatch(built):
    odd = zoo.build_classifier(small_config("mlp", classes=5), 0)
    with pytest.raises(ValueError, match="classes"):
        bench.eval_transfer_matrix(built, {"odd": odd})
    with pytest.raises(ValueError):
        bench.eval_transfer_matrix(built, {})


def test_matrix_order_independent(built, zoo4):
    m = bench.eval_transfer_matrix(built, zoo4)
    rev = dict(reversed(list(zoo4.items())))
    assert bench.eval_transfer_matrix(built, rev).accuracy.tobytes() == m.accuracy.tobytes()
    perm = np.random.default_rng(1).permutation(len(built))
    shuffled = bench.TransferBenchmark(
        built.images[perm],
        built.labels[perm],
        4,
        16.0,
        {k: v[perm] for k, v in built.adversarial.items()},
        built.surrogate_meta,
    )
    assert bench.eval_transfer_matrix(shuffled, zoo4).accuracy.tobytes() == m.accuracy.tobytes()


def test_matrix_threads_agree(built, zoo4):
    a = bench.eval_transfer_matrix(built, zoo4, threads=1)
    b = bench.eval_transfer_matrix(built, zoo4, threads=3)
    assert a.accuracy.tobytes() == b.accuracy.tobytes()


def test_matrix_validation():
    meta = {"a": {"family": "mlp", "tag": "ST"}}
    with pytest.raises(ValueError):
        bench.TransferMatrix(["a"], ["a"], [[1.5]], [[1]], {"a": 1.0}, meta)
    with pytest.raises(ValueError):
        bench.TransferMatrix(["a"], ["a"], [[0.5, 0.5]], [[1, 1]], {"a": 1.0}, meta)


# ---------------------------------------------------------------------------
# aggregation


def fixture_matrix(acc, tags=("AT", "ST")):
    ids = [f"m{t}" for t in tags]
    meta = {i: {"family": "mlp", "tag": t} for i, t in zip(ids, tags)}
    return bench.TransferMatrix(ids, ids, np.asarray(acc, dtype=float), np.ones((len(ids), len(ids))), {}, meta)


def test_constant_matrix_aggregates_to_constant():
    tags = ("AT", "AT", "ST", "ST")
    ids = [f"m{i}" for i in range(4)]
    meta = {i: {"family": "mlp", "tag": t} for i, t in zip(ids, tags)}
    m = bench.TransferMatrix(ids, ids, np.full((4, 4), 0.37), np.ones((4, 4)), {}, meta)
    for diag in (True, False):
        agg = bench.aggregate_training_type(m, diag)
        assert all(v == pytest.approx(0.37, abs=1e-15) for v in agg.means.values())
    assert bench.aggregate_training_type(m, True).counts[("AT", "AT")] == 2
    assert bench.aggregate_training_type(m, False).counts[("AT", "AT")] == 4


def test_hand_built_two_by_two():
    m = fixture_matrix([[0.1, 0.2], [0.3, 0.4]])
    with_diag = bench.aggregate_training_type(m, exclude_diagonal=False)
    assert with_diag.means == {("AT", "AT"): 0.1, ("AT", "ST"): 0.2, ("ST", "AT"): 0.3, ("ST", "ST"): 0.4}
    no_diag = bench.aggregate_training_type(m, exclude_diagonal=True)
    assert no_diag.means[("AT", "ST")] == 0.2 and no_diag.means[("ST", "AT")] == 0.3
    assert np.isnan(no_diag.means[("AT", "AT")]) and no_diag.counts[("AT", "AT")] == 0
    assert no_diag.to_dict()["means"]["AT->AT"] is None
    assert bench.surrogate_tag_means(m, exclude_diagonal=False) == {"AT": pytest.approx(0.15), "ST": pytest.approx(0.35)}


def test_untagged_model_rejected():
    m = fixture_matrix([[0.1, 0.2], [0.3, 0.4]])
    m.meta["mST"]["tag"] = None
    with pytest.raises(ValueError, match="mST"):
        bench.aggregate_training_type(m)


def test_aggregate_recomputes_from_csv(built, zoo4):
    m = bench.eval_transfer_matrix(built, zoo4)
    text = bench.transfer_csv(m)
    rows = list(csv.DictReader(io.StringIO(text)))
    assert len(rows) == 16 and list(rows[0]) == list(bench.TRANSFER_COLUMNS)
    for diag in (True, False):
        agg = bench.aggregate_training_type(m, diag)
        again = bench.aggregate_from_csv(text, diag)
        assert again == agg.means
    # independent recompute straight from the 4x4 grid
    tag = {k: zoo4[k].tag for k in zoo4}
    for s_tag, t_tag in itertools.product(("AT", "ST"), repeat=2):
        vals = [
            m.cell(s, t)
            for s in m.surrogates
            for t in m.targets
            if s != t and tag[s] == s_tag and tag[t] == t_tag
        ]
        assert bench.aggregate_training_type(m).mean(s_tag, t_tag) == pytest.approx(sum(vals) / len(vals), abs=1e-15)


def test_reference_aggregate_values():
    assert bench.REFERENCE_AGGREGATE == {
        ("AT", "AT"): 0.1316,
        ("AT", "ST"): 0.2658,
        ("ST", "AT"): 0.4809,
        ("ST", "ST"): 0.3288,
    }


# ---------------------------------------------------------------------------
# export


def test_two_by_two_csvs_byte_stable():
    m = fixture_matrix([[0.25, 0.5], [0.75, 1.0]])
    grid = bench.grid_csv(m)
    assert grid == "surrogate,mAT,mST\nmAT,0.25,0.5\nmST,0.75,1.0\n"
    agg = bench.aggregate_csv(bench.aggregate_training_type(m, exclude_diagonal=False))
    assert agg == "surrogate_tag,AT,ST\nAT,0.25,0.5\nST,0.75,1.0\n"
    assert len(agg.splitlines()) == 3
    assert bench.grid_csv(m) == grid


def test_heat_color_ramp():
    assert bench.heat_color(0.0) == "#0000ff"
    assert bench.heat_color(1.0) == "#ffffff"
    assert bench.heat_color(0.5) == "#8080ff"
    assert bench.heat_color(-3) == "#0000ff" and bench.heat_color(7) == "#ffffff"


def test_uniform_heatmap_single_color():
    m = fixture_matrix(np.full((2, 2), 0.6))
    svg = bench.heatmap_svg(m)
    fills = {line.split('fill="')[1].split('"')[0] for line in svg.splitlines() if "<rect" in line}
    assert fills == {bench.heat_color(0.6)}
    assert svg.startswith("<?xml") and 'version="1.1"' in svg


def test_attribution_pgm():
    blank = bench.attribution_pgm(np.zeros((5, 7, 3)))
    assert blank.startswith(b"P5\n7 5\n255\n")
    assert np.all(bench.read_pgm(blank) == 128)
    a = np.zeros((2, 2))
    a[0, 0], a[1, 1] = 2.0, -1.0
    np.testing.assert_array_equal(bench.read_pgm(bench.attribution_pgm(a)), [[255, 128], [128, 64]])
    with pytest.raises(ValueError):
        bench.attribution_pgm(np.zeros(4))


def test_export_reports(tmp_path, built, zoo4):
    m = bench.eval_transfer_matrix(built, zoo4)
    rep = bench.eval_robustness_sweep(zoo4["mlp-ST"], built, epsilon_list=[0.0])
    paths = bench.export_reports(tmp_path, m, rep, {"x": np.ones((4, 4))}, {"seed": 1})
    names = sorted(p.name for p in paths)
    assert names == sorted(
        ["transfer.csv", "transfer_grid.csv", "heatmap.svg", "aggregate.csv", "robustness.csv", "x.pgm", "report.json"]
    )
    first = {p.name: p.read_bytes() for p in paths}
    paths = bench.export_reports(tmp_path, m, rep, {"x": np.ones((4, 4))}, {"seed": 1})
    assert {p.name: p.read_bytes() for p in paths} == first
