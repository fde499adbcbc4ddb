import json
import math

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from gaitkit.ablation import VARIANTS, ablation_run, variant_config
from gaitkit.backbone import GaitModel
from gaitkit.data import DatasetIndex, SequenceStore
from gaitkit.errors import ConfigError, DimensionError
from gaitkit.evaluation import EmbeddingTable, EvalProtocol, embed_all, evaluate, rank1

from conftest import tiny_backbone, tiny_experiment
from oracles import rank1_oracle


def table(emb, subjects, views, conds=None, seq_nos=None):
    n = len(emb)
    return EmbeddingTable(np.asarray(emb, dtype=float), list(subjects), list(conds or ["NM"] * n),
                          list(views), list(seq_nos or [1] * n))


PROTO = EvalProtocol(probe_conditions=["NM", "CL"])


# ---------------------------------------------------------------- rank1

def test_matching_other_view_gives_full_accuracy():
    gal = table([[0, 0], [100, 0], [0, 100]], ["a", "b", "c"], [90, 90, 90])
    prb = table([[0, 0], [100, 0], [0, 100]], ["a", "b", "c"], [0, 0, 0])
    rep = rank1(gal, prb, PROTO)
    assert rep.accuracy.tolist() == [[100.0]] and rep.mean == 100.0 and rep.skipped == 0


def test_three_subjects_two_views_by_hand():
    gal = table([[0, 0], [10, 0], [0, 5], [10, 5], [0, 10], [10, 10]],
                ["a", "a", "b", "b", "c", "c"], [0, 90, 0, 90, 0, 90])
    prb = table([[9, 1], [9, 9], [1, 9], [1, 4], [0.5, 5.5]],
                ["a", "b", "c", "a", "b"], [0, 0, 90, 90, 90], ["NM", "NM", "NM", "NM", "CL"])
    # a@0 -> (10,0) a hit; b@0 -> (10,10) c miss; c@90 -> (0,10) c hit; a@90 -> (0,5) b miss; b@90 CL -> (0,5) hit
    rep = rank1(gal, prb, PROTO)
    assert rep.views == [0, 90] and rep.conditions == ["NM", "CL"]
    assert rep.accuracy[:, 0].tolist() == [50.0, 50.0]
    assert math.isnan(rep.accuracy[0, 1]) and rep.accuracy[1, 1] == 100.0
    assert rep.condition_means == {"NM": 50.0, "CL": 100.0}
    assert rep.mean == 75.0
    assert rep.probes.tolist() == [[2, 0], [2, 1]]


def test_ties_go_to_lowest_gallery_index():
    prb = table([[0, 0]], ["a"], [0])
    assert rank1(table([[1, 0], [-1, 0]], ["a", "b"], [90, 90]), prb, PROTO).mean == 100.0
    assert rank1(table([[1, 0], [-1, 0]], ["b", "a"], [90, 90]), prb, PROTO).mean == 0.0


def test_row_order_invariance(rng):
    gal = table(rng.standard_normal((12, 3)), [f"s{i % 4}" for i in range(12)], [0, 90, 180] * 4)
    prb = table(rng.standard_normal((9, 3)), [f"s{i % 4}" for i in range(9)], [0, 90, 180] * 3,
                ["NM", "CL", "NM"] * 3)
    ref = rank1(gal, prb, PROTO)
    for _ in range(5):
        a = rank1(gal.subset(rng.permutation(12)), prb.subset(rng.permutation(9)), PROTO)
        np.testing.assert_array_equal(a.accuracy, ref.accuracy)


@settings(max_examples=50, deadline=None)
@given(st.integers(0, 2**32 - 1), st.integers(1, 15), st.integers(1, 15), st.booleans())
def test_rank1_matches_brute_force(seed, n_gal, n_prb, exclude):
    r = np.random.default_rng(seed)
    # small integer coordinates make exact distance ties common
    ge, pe = r.integers(-2, 3, (n_gal, 2)), r.integers(-2, 3, (n_prb, 2))
    gs, ps = r.integers(0, 4, n_gal).tolist(), r.integers(0, 4, n_prb).tolist()
    gv, pv = r.choice([0, 90, 180], n_gal).tolist(), r.choice([0, 90, 180], n_prb).tolist()
    pc = r.choice(["NM", "CL"], n_prb).tolist()
    proto = EvalProtocol(probe_conditions=["NM", "CL"], exclude_identical_view=exclude)
    rep = rank1(table(ge, gs, gv), table(pe, ps, pv, pc), proto)
    hits, counts, skipped = rank1_oracle(ge.tolist(), gs, gv, pe.tolist(), ps, pv, pc, exclude)
    assert rep.skipped == skipped
    for i, v in enumerate(rep.views):
        for j, c in enumerate(rep.conditions):
            n = counts.get((v, c), 0)
            assert rep.probes[i, j] == n
            if n:
                assert rep.accuracy[i, j] == 100.0 * hits[(v, c)] / n
            else:
                assert math.isnan(rep.accuracy[i, j])


@settings(max_examples=30, deadline=None)
@given(st.integers(0, 2**32 - 1))
def test_exclusion_never_raises_accuracy_when_identical_view_matches_exist(seed):
    r = np.random.default_rng(seed)
    subjects, views = 4, [0, 90, 180]
    centers = r.standard_normal((subjects, len(views), 3)) * 10
    gal = [(s, v) for s in range(subjects) for v in range(len(views))]
    prb = [(s, v) for s in range(subjects) for v in range(len(views)) if r.random() < 0.7] or [(0, 0)]
    g = table([centers[s, v] for s, v in gal], [s for s, _ in gal], [views[v] for _, v in gal])
    p = table([centers[s, v] + r.normal(0, 1e-3, 3) for s, v in prb], [s for s, _ in prb],
              [views[v] for _, v in prb])
    with_ex = rank1(g, p, EvalProtocol(exclude_identical_view=True))
    without = rank1(g, p, EvalProtocol(exclude_identical_view=False))
    assert without.mean == 100.0
    assert with_ex.mean <= without.mean


def test_skipped_probes_are_tallied():
    gal = table([[0, 0], [1, 1]], ["a", "b"], [0, 0])
    prb = table([[0, 0], [1, 1], [0, 0]], ["a", "b", "a"], [0, 0, 90])
    rep = rank1(gal, prb, PROTO)
    assert rep.skipped == 2
    assert math.isnan(rep.accuracy[0, 0]) and rep.accuracy[1, 0] == 100.0
    assert rep.probes.tolist() == [[0], [1]]
    assert "skipped probes: 2" in rep.to_text()
    assert rep.to_dict()["skipped"] == 2


def test_dimension_mismatch(rng):
    with pytest.raises(DimensionError):
        rank1(table(rng.random((2, 3)), "ab", [0, 0]), table(rng.random((1, 4)), "a", [90]), PROTO)
    with pytest.raises(DimensionError):
        EmbeddingTable(rng.random((2, 3)), ["a"], ["NM", "NM"], [0, 0], [1, 1])


# ---------------------------------------------------------------- protocol

def test_protocol_split():
    proto = EvalProtocol(gallery_seqs=[1, 2], probe_conditions=["NM", "CL"])
    t = table(np.eye(5), "abcde", [0] * 5, ["NM", "NM", "NM", "CL", "BG"], [1, 2, 5, 1, 1])
    gal, prb = t.split(proto)
    assert gal.subjects == ["a", "b"] and prb.subjects == ["c", "d"]


def test_protocol_from_dict():
    proto = EvalProtocol.from_dict({"split": "train", "gallery_seqs": [1]})
    assert proto.split == "train" and proto.exclude_identical_view
    assert EvalProtocol.from_dict(proto.to_dict()) == proto
    with pytest.raises(ConfigError):
        EvalProtocol.from_dict({"galery_seqs": [1]})
    with pytest.raises(ConfigError):
        EvalProtocol(gallery_seqs=[])
    with pytest.raises(ConfigError):
        EvalProtocol(batch_size=0)


# ---------------------------------------------------------------- report formats

def report():
    gal = table([[0, 0], [10, 0], [0, 5], [10, 5]], "aabb", [0, 90, 0, 90])
    prb = table([[9, 1], [1, 4], [0, 6]], "aab", [0, 90, 90], ["NM", "NM", "CL"])
    return rank1(gal, prb, PROTO)


def test_text_report_layout():
    lines = report().to_text().splitlines()
    assert lines[0] == "Probe        0      90    Mean"
    assert lines[2] == "NM       100.0     0.0    50.0"
    assert lines[3] == "CL           -   100.0   100.0"
    assert lines[5] == "Mean                      75.0"
    assert len({len(line) for line in lines[:6]}) == 1


def test_json_report_schema():
    doc = json.loads(report().to_json())
    assert set(doc) == {"views", "conditions", "accuracy", "probes", "condition_mean", "mean", "skipped"}
    assert doc["accuracy"] == [[100.0, None], [0.0, 100.0]]
    assert doc["condition_mean"] == {"NM": 50.0, "CL": 100.0} and doc["mean"] == 75.0


def test_heat_strip_and_write(tmp_path):
    rep = report()
    pgm = rep.heat_strip(cell=2)
    header = b"P5\n4 4\n255\n"
    assert pgm.startswith(header)
    img = np.frombuffer(pgm[len(header):], dtype=np.uint8).reshape(4, 4)
    assert img[0, 0] == 255 and img[0, 2] == 0 and img[2, 0] == 0 and img[2, 2] == 255
    written = rep.write(tmp_path / "r.json", heat_strip=True)
    assert [p.name for p in written] == ["r.txt", "r.json", "r.pgm"]
    assert (tmp_path / "r.txt").read_text() == rep.to_text()


# ---------------------------------------------------------------- embedding

@pytest.fixture(scope="module")
def all_sequences(tiny_dataset):
    return SequenceStore.from_index(DatasetIndex.load(tiny_dataset), None)


def test_embed_all_count_determinism_and_batch_independence(all_sequences):
    model = GaitModel(tiny_backbone(), seed=5)
    a = embed_all(model, all_sequences, EvalProtocol(batch_size=16))
    b = embed_all(model, all_sequences, EvalProtocol(batch_size=1))
    c = embed_all(model, all_sequences, EvalProtocol(batch_size=16))
    n = len(all_sequences.sequences)
    assert len(a) == n and a.embeddings.shape == (n, 2 * 4)
    np.testing.assert_array_equal(a.embeddings, c.embeddings)
    assert np.abs(a.embeddings - b.embeddings).max() <= 1e-12
    assert model.training


def test_embed_all_normalize_flag(all_sequences):
    model = GaitModel(tiny_backbone(), seed=5)
    t = embed_all(model, all_sequences, EvalProtocol(normalize=True))
    np.testing.assert_allclose(np.linalg.norm(t.embeddings, axis=1), 1.0, atol=1e-12)


def test_evaluate_end_to_end(all_sequences):
    model = GaitModel(tiny_backbone(), seed=5)
    proto = EvalProtocol(split="all", gallery_seqs=[1], probe_conditions=["NM", "CL"])
    rep = evaluate(model, all_sequences, proto)
    assert rep.views == [0, 90] and rep.conditions == ["NM", "CL"]
    assert rep.probes.sum() == 4 * 2 * 2 and rep.skipped == 0
    assert np.all((rep.accuracy >= 0) & (rep.accuracy <= 100))
    assert evaluate(model, all_sequences, proto).to_json() == rep.to_json()


# ---------------------------------------------------------------- ablation

def test_toggle_off_keeps_base_digest():
    base = tiny_experiment(backbone=tiny_backbone(simo=None, femo_enabled=[False, False]))
    assert variant_config(base, False, False).digest() == base.digest()
    full = tiny_experiment()
    assert variant_config(full, True, True).digest() == full.digest()
    assert len({variant_config(full, s, f).digest() for _, s, f in VARIANTS}) == 4
    bb = variant_config(base, True, True).backbone
    assert bb.simo is not None and bb.femo_enabled == [False, True]


def test_ablation_report_has_all_variants(tmp_path, tiny_dataset):
    cfg = tiny_experiment(data_root=str(tiny_dataset))
    seen = []
    rep = ablation_run(cfg, seeds=(0,), out_dir=tmp_path, progress=lambda v, s, r: seen.append((v, s)))
    assert rep.variants() == ["plain", "simo", "femo", "full"]
    assert seen == [(v, 0) for v in rep.variants()]
    doc = json.loads(rep.to_json())
    assert set(doc["variants"]) == {"plain", "simo", "femo", "full"}
    for v in doc["variants"].values():
        assert set(v) == {"config_digest", "condition_mean", "mean", "per_seed_mean"}
    text = rep.to_text().splitlines()
    assert [line.split()[0] for line in text[2:6]] == ["plain", "simo", "femo", "full"]
    assert (tmp_path / "full_seed0" / "report.json").is_file()
    assert doc["variants"]["full"]["config_digest"] == cfg.digest()
