import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st

from mstransformer.model import Model, ModelConfig, flex_config
from mstransformer.probe import (
    AttentionRecord,
    ProbeReport,
    distance_histogram,
    edge_keys,
    export_attention,
    extract_edges,
    head_widths,
    load_attention,
    n_buckets,
    probe_dump,
    probe_maps,
    probe_model,
    write_histogram_csv,
)


def brute_force_edges(attn):
    out = []
    for j, row in enumerate(attn):
        best = 0
        for c in range(1, len(row)):
            if row[c] > row[best]:
                best = c
        out.append(best)
    return out


def test_extract_edges_example():
    attn = np.array([[0.1, 0.9, 0.0], [0.5, 0.5, 0.0], [0.2, 0.3, 0.5]])
    recs = extract_edges(attn, layer=2, head=1)
    assert recs == [AttentionRecord(2, 1, 0, 1), AttentionRecord(2, 1, 1, 0), AttentionRecord(2, 1, 2, 2)]
    assert [r.distance for r in recs] == [1, 1, 0]


def test_window_offsets():
    compact = np.array([[0.7, 0.3], [0.2, 0.8], [0.6, 0.4]])
    np.testing.assert_array_equal(edge_keys(compact, offsets=[0, 0, 1]), [0, 1, 1])
    with pytest.raises(ValueError):
        edge_keys(compact, offsets=[0, 1])


@pytest.mark.parametrize("bad", [np.zeros((0, 3)), np.zeros(4), np.zeros((2, 2, 2))])
def test_edge_keys_rejects_bad_maps(bad):
    with pytest.raises(ValueError):
        edge_keys(bad)


def test_edges_match_brute_force_on_random_maps():
    rng = np.random.default_rng(0)
    for _ in range(1000):
        n = int(rng.integers(1, 12))
        attn = rng.random((n, n))
        if rng.random() < 0.3:
            attn = np.round(attn, 1)  # force ties
        assert edge_keys(attn).tolist() == brute_force_edges(attn)


@given(st.integers(1, 10), st.floats(0.01, 100), st.integers(0, 2**31))
def test_edges_invariant_to_positive_rescaling(n, factor, seed):
    attn = np.random.default_rng(seed).random((n, n))
    np.testing.assert_array_equal(edge_keys(attn), edge_keys(attn * factor))


def test_histogram_example():
    pct = distance_histogram([0, 0, 1, 3], n=4)
    np.testing.assert_allclose(pct, [50.0, 25.0, 25.0])
    full = distance_histogram([0, 0, 1, 3], n=4, truncate_at_half=False)
    np.testing.assert_allclose(full, [50.0, 25.0, 0.0, 25.0])


def test_histogram_accepts_records():
    recs = extract_edges(np.eye(3))
    np.testing.assert_allclose(distance_histogram(recs, 3), [100.0, 0.0])


def test_histogram_errors():
    with pytest.raises(ValueError):
        distance_histogram([], 4)
    with pytest.raises(ValueError):
        distance_histogram([-1], 4)
    with pytest.raises(ValueError):
        n_buckets(0)


@given(st.lists(st.integers(0, 60), min_size=1, max_size=300), st.integers(1, 40), st.booleans())
def test_histogram_sums_to_100(dist, n, truncate):
    assert abs(distance_histogram(dist, n, truncate_at_half=truncate).sum() - 100.0) <= 1e-9


def random_stack(rng, layers, heads, n):
    return [rng.dirichlet(np.ones(n), size=(heads, n)) for _ in range(layers)]


def test_layer_mix_is_union_of_heads():
    rng = np.random.default_rng(1)
    report = probe_maps([random_stack(rng, 2, 3, 6), random_stack(rng, 2, 3, 6)])
    for layer in report.layers:
        joined = np.sort(np.concatenate([report.head_distances(layer, h) for h in report.heads(layer)]))
        np.testing.assert_array_equal(np.sort(report.layer_distances(layer)), joined)
    rows = report.histograms()
    for layer in (1, 2):
        for head in ("ALL", 0, 1, 2):
            total = sum(r["percentage"] for r in rows if r["layer"] == layer and r["head"] == head)
            assert abs(total - 100.0) <= 1e-9


def test_probe_maps_rejects_non_square():
    with pytest.raises(ValueError):
        probe_maps([[np.zeros((1, 2, 3))]])
    with pytest.raises(ValueError):
        probe_maps([])


def test_width_one_model_only_attends_to_itself():
    model = Model(ModelConfig(vocab_size=20, d_model=8, head_dim=2, n_heads=4, scales="1"), seed=0)
    rng = np.random.default_rng(0)
    report = probe_model(model, [rng.integers(0, 20, size=int(rng.integers(1, 12))) for _ in range(20)])
    rows = report.histograms()
    assert all(r["percentage"] == (100.0 if r["distance_bucket"] == 0 else 0.0) for r in rows)


def test_windowed_heads_respect_their_reach():
    model = Model(flex_config(vocab_size=20, d_model=8, head_dim=2, n_heads=5), seed=3)
    rng = np.random.default_rng(3)
    report = probe_model(model, [rng.integers(0, 20, size=int(rng.integers(2, 40))) for _ in range(30)])
    for (layer, head), w in report.widths.items():
        assert report.head_distances(layer, head).max() <= (w - 1) // 2


def test_head_widths_vanilla_is_full():
    model = Model(ModelConfig(kind="vanilla", vocab_size=5, d_model=8, head_dim=2, n_heads=2), seed=0)
    assert set(head_widths(model, 7).values()) == {13}


def test_dump_round_trip(tmp_path):
    rng = np.random.default_rng(2)
    seqs = [random_stack(rng, 2, 3, 5), random_stack(rng, 2, 3, 8)]
    export_attention(seqs, tmp_path / "dump")
    manifest, back = load_attention(tmp_path / "dump")
    assert manifest["lengths"] == [5, 8] and manifest["n"] == 8
    for a, b in zip(seqs, back):
        for x, y in zip(a, b):
            np.testing.assert_array_equal(x, y)
    assert probe_dump(tmp_path / "dump").histograms() == probe_maps(seqs, n=8).histograms()


def test_dump_validation(tmp_path):
    with pytest.raises(FileNotFoundError):
        load_attention(tmp_path / "missing")
    rng = np.random.default_rng(0)
    export_attention([random_stack(rng, 1, 2, 4)], tmp_path / "d")
    manifest = tmp_path / "d" / "manifest.json"
    manifest.write_text(manifest.read_text().replace('"heads": 2', '"heads": 3'))
    with pytest.raises(ValueError):
        load_attention(tmp_path / "d")


def test_export_rejects_ragged_heads(tmp_path):
    rng = np.random.default_rng(0)
    with pytest.raises(ValueError):
        export_attention([random_stack(rng, 1, 2, 4), random_stack(rng, 1, 3, 4)], tmp_path / "d")


def test_histogram_csv(tmp_path):
    report = ProbeReport(4)
    report.add(1, 0, np.array([0, 1]))
    write_histogram_csv(tmp_path / "h.csv", report.histograms())
    lines = (tmp_path / "h.csv").read_text().splitlines()
    assert lines[0] == "layer,head,distance_bucket,percentage"
    assert lines[1] == "1,ALL,0,50.0"
    assert len(lines) == 1 + 2 * 3
