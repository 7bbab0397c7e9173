import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from sfolab import negatives
from sfolab.config import SynthConfig
from sfolab.flow import SamplerConfig, row_noise, sample_chunked
from sfolab.negatives import (
    N_BINS, cdns_condition, degrade_conditions, gap_stats_from_similarity, load_quads, pair_gap_stats,
    pair_similarity, reference_field, save_quads, synth_cdns, synth_dpo_sim, synth_selfplay, synthesize,
)
from sfolab.numcore import RngStream, tag_of
from sfolab.pipeline import layout_for
from sfolab.world import fidelity_oracle

from _util import tiny_ref_checkpoint, tiny_world

FAST = SamplerConfig(steps=3, guidance_scale=2.0)


@pytest.fixture(scope="module")
def world():
    return tiny_world()


@pytest.fixture(scope="module")
def ckpt(world):
    return tiny_ref_checkpoint(world, pre_iters=40, sft_iters=20)


def _synth(world, ckpt, strategy, **kw):
    cfg = SynthConfig(strategy=strategy, sampler=FAST, chunk_size=5, **kw)
    return synthesize(ckpt.stack, layout_for(world), world, world.indices("train"), cfg, 7)


def test_cdns_degrades_both_conditions(world):
    idx = world.indices("train")[:6]
    before = world.cond_matrix(idx).copy()
    cond, flags = degrade_conditions(world, idx, "cdns", 0.5)
    k = world.spec.subject_dim
    assert flags.all()
    assert np.all(cond[:, k:-2] == 0) and np.all(cond[:, -2] == 1) and np.all(cond[:, -1] == 0)
    # the cue is the scene's subject block plus half its context block
    ctx = world.unmix(world.x_tgt[idx])[:, k:]
    assert np.allclose(cond[:, :k], world.unmix(world.x_tgt[idx])[:, :k] + 0.5 * ctx[:, :k])
    assert np.array_equal(world.cond_matrix(idx), before)


def test_single_axis_variants(world):
    idx = world.indices("train")[:4]
    clean = world.cond_matrix(idx)
    k = world.spec.subject_dim
    img, f_img = degrade_conditions(world, idx, "cdns_img_only", 0.5)
    txt, f_txt = degrade_conditions(world, idx, "cdns_text_only", 0.5)
    assert f_img.all() and np.array_equal(img[:, k:], clean[:, k:])
    assert not f_txt.any() and np.array_equal(txt[:, :k], clean[:, :k]) and np.all(txt[:, -2] == 1)


def test_cdns_condition_single_triplet(world):
    tr = world.triplet(int(world.indices("train")[0]))
    pair = cdns_condition(world, tr)
    assert pair.degraded_flag and pair.generic_flag and not np.any(pair.c_text)


def test_positive_is_the_world_target(world, ckpt):
    q = _synth(world, ckpt, "cdns")
    idx = world.indices("train")
    assert np.array_equal(q.x_pos, world.x_tgt[idx])
    assert np.array_equal(q.cond, world.cond_matrix(idx))
    assert q.degraded.all() and set(q.provenance) == {"cdns"}
    assert not _synth(world, ckpt, "selfplay").degraded.any()


def test_dpo_sim_orders_by_fidelity(world, ckpt):
    q = _synth(world, ckpt, "dpo_sim")
    fp = fidelity_oracle(q.x_pos, q.subject_id, world)
    fn = fidelity_oracle(q.x_neg, q.subject_id, world)
    assert np.all(fp >= fn)
    assert not np.array_equal(q.x_pos, world.x_tgt[q.record_index])


def test_dpo_sim_tie_keeps_first_sample(world, ckpt, monkeypatch):
    monkeypatch.setattr(negatives, "fidelity_oracle", lambda x, sid, w: np.zeros(len(x)))
    layout = layout_for(world)
    cfg = SynthConfig(strategy="dpo_sim", sampler=FAST)
    q = synthesize(ckpt.stack, layout, world, [0, 1], cfg, 3)
    x1 = row_noise(RngStream(3, tag_of("synth:dpo_sim")), [(0, 0), (1, 0)], world.spec.data_dim)
    first = sample_chunked(reference_field(ckpt.stack, layout), world.cond_matrix([0, 1]), FAST, x1)
    assert np.array_equal(q.x_pos, first)
    assert not np.array_equal(q.x_neg, first)


@pytest.mark.parametrize("strategy", ["cdns", "selfplay", "dpo_sim"])
def test_synthesis_is_chunk_and_thread_invariant(world, ckpt, strategy):
    layout = layout_for(world)
    idx = world.indices("train")
    a = synthesize(ckpt.stack, layout, world, idx, SynthConfig(strategy=strategy, sampler=FAST, chunk_size=64), 7)
    b = synthesize(ckpt.stack, layout, world, idx, SynthConfig(strategy=strategy, sampler=FAST, chunk_size=3), 7, 4)
    assert a.x_neg.tobytes() == b.x_neg.tobytes() and a.x_pos.tobytes() == b.x_pos.tobytes()


def test_record_subset_matches_full_run(world, ckpt):
    layout = layout_for(world)
    idx = world.indices("train")
    cfg = SynthConfig(strategy="cdns", sampler=FAST)
    full = synthesize(ckpt.stack, layout, world, idx, cfg, 7)
    part = synthesize(ckpt.stack, layout, world, idx[[3, 1]], cfg, 7)
    assert np.array_equal(part.x_neg, full.x_neg[[3, 1]])


def test_per_triplet_wrappers(world, ckpt):
    layout = layout_for(world)
    i = int(world.indices("train")[2])
    for fn, prov in ((synth_selfplay, "selfplay"), (synth_cdns, "cdns"), (synth_dpo_sim, "dpo_sim")):
        q = fn(ckpt.stack, layout, world, i, FAST, 5)
        assert q.provenance == prov and q.subject_id == world.subject_id[i]
        assert q.x_neg.shape == (world.spec.data_dim,)


def test_needs_reference_adapter(world, ckpt):
    bare = ckpt.stack.set_enabled(set())
    bare.adapters.pop("ref")
    with pytest.raises(ValueError, match="ref"):
        synthesize(bare, layout_for(world), world, [0], SynthConfig(sampler=FAST), 0)


def test_similarity_filter(world, ckpt):
    q = _synth(world, ckpt, "cdns", filter_max_similarity=0.5)
    assert np.all(pair_similarity(q.x_pos, q.x_neg, world) <= 0.5)


def test_gap_stats_hand_cases():
    s = gap_stats_from_similarity(np.array([1.0, 1.0]))
    assert (s.mean, s.std, s.mass_below_08, s.histogram[-1]) == (1.0, 0.0, 0, 2)
    s = gap_stats_from_similarity(np.array([1.0, 0.0]), np.array([0.3, -0.1]))
    assert s.mean == 0.5 and s.std == 0.5 and s.mass_below_08 == 1
    assert s.histogram[25] == 1 and s.median_fidelity_gap == pytest.approx(0.2)
    assert len(s.bin_edges) == N_BINS + 1 and s.bin_edges[0] == -1.0 and s.bin_edges[-1] == 1.0
    assert gap_stats_from_similarity(np.array([-1.0])).histogram[0] == 1
    with pytest.raises(ValueError):
        gap_stats_from_similarity(np.array([]))


@given(st.lists(st.floats(-1, 1), min_size=1, max_size=200))
@settings(max_examples=50)
def test_histogram_accounts_for_every_pair(sim):
    s = gap_stats_from_similarity(np.asarray(sim))
    assert sum(s.histogram) == s.count == len(sim)
    assert s.mass_below_08 == sum(1 for v in sim if v < 0.8)


def test_identical_pairs_have_unit_similarity(world):
    x = world.x_tgt[:5]
    assert np.allclose(pair_similarity(x, x.copy(), world), 1.0)


def test_quads_roundtrip(tmp_path, world, ckpt):
    q = _synth(world, ckpt, "cdns")
    save_quads(tmp_path / "q", q, {"seed": 7})
    man, back = load_quads(tmp_path / "q")
    assert man["count"] == len(q) and man["provenance_names"] == ["cdns"]
    for name in ("x_pos", "x_neg", "cond", "neg_cond", "record_index", "subject_id", "degraded"):
        assert np.array_equal(getattr(back, name), getattr(q, name))
    assert back.provenance == q.provenance
    assert pair_gap_stats(back, world) == pair_gap_stats(q, world)
    quad = back.quadruplet(0, world)
    assert quad.provenance == "cdns" and np.array_equal(quad.x_tgt, q.x_pos[0])
