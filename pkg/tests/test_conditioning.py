import numpy as np
import pytest

from progdit import conditioning as C
from progdit import nn
from progdit import tensor as T
from progdit.tensor import Tensor


def rec(**kw):
    base = dict(diagnosis_baseline="CN", diagnosis_target="CN", age_years=71.0, sex="F",
                education_years=16, delta_t_months=0, score_deltas={s: 0.0 for s in C.SCORE_NAMES})
    base.update(kw)
    return C.PromptRecord(**base)


@pytest.fixture(scope="module")
def encoders():
    return C.TextEncoders()


# -- prompt -----------------------------------------------------------------
def test_prompt_examples():
    assert "Follow-up 0 months" in C.build_prompt(rec())
    text = C.build_prompt(rec(diagnosis_baseline="MCI", diagnosis_target="AD", delta_t_months=11,
                              score_deltas={"MMSE": -4.0}))
    assert "MCI to AD" in text and "MMSE=-4" in text
    assert "CDR-SB" not in text
    assert C.build_prompt(rec()).encode() == C.build_prompt(rec()).encode()


def test_prompt_field_order_stable():
    t = C.build_prompt(rec(score_deltas={"ADAS13": 2.0, "MMSE": -1.0}))
    assert t.index("MMSE=-1") < t.index("ADAS13=2")
    assert t.index("Diagnosis") < t.index("Follow-up") < t.index("Age") < t.index("Changes")


@pytest.mark.parametrize("kw", [dict(diagnosis_target="Dementia"), dict(diagnosis_baseline="cn"),
                                dict(delta_t_months=-1), dict(score_deltas={"IQ": 1.0})])
def test_prompt_validation(kw):
    with pytest.raises(C.ValidationError):
        rec(**kw)


# -- tokenizer ----------------------------------------------------------------
def test_tokenize_examples():
    ids, mask = C.tokenize("", 8)
    assert np.all(ids == C.PAD_ID) and mask.sum() == 0
    ids, mask = C.tokenize("mri mri", 8)
    assert ids[0] == ids[1] != C.PAD_ID and mask.sum() == 2
    ids, mask = C.tokenize(" ".join(f"w{i}" for i in range(40)), 32)
    assert len(ids) == 32 and mask.sum() == 32


def test_tokenize_case_fold_and_punctuation():
    a, _ = C.tokenize("MRI, slice.", 6)
    b, _ = C.tokenize("mri , slice .", 6)
    assert np.array_equal(a, b)
    assert C.tokenize("x", 4, vocab_size=50)[0].max() < 50


# -- encoders ---------------------------------------------------------------
def test_encoder_shapes_at_toy_dims(encoders):
    e = encoders.embed(C.build_prompt(rec()))
    assert e.h_clip.shape == (16, 64) and e.h_t5.shape == (32, 128)
    w = e.t5_mask / e.t5_mask.sum()
    assert np.max(np.abs(e.y_pooled - (w[:, None] * e.h_t5).sum(0))) < 1e-10


def test_all_pad_pooling_falls_back_to_plain_mean(encoders):
    e = encoders.embed("")
    assert np.all(np.isfinite(e.h_t5))
    assert np.max(np.abs(e.y_pooled - e.h_t5.mean(0))) < 1e-10


def test_distinct_prompts_distinct_pooled(encoders):
    a = encoders.embed(C.build_prompt(rec())).y_pooled
    b = encoders.embed(C.build_prompt(rec(diagnosis_target="AD", delta_t_months=36))).y_pooled
    cos = a @ b / np.linalg.norm(a) / np.linalg.norm(b)
    assert cos < 1 - 1e-6


def test_encoders_deterministic_across_instances():
    text = C.build_prompt(rec(delta_t_months=24))
    a, b = C.TextEncoders().embed(text), C.TextEncoders().embed(text)
    assert a.y_pooled.tobytes() == b.y_pooled.tobytes()


def test_encoder_outputs_differentiable(rng):
    enc = C.ToyTextEncoder(32, 5, 8, 2, rng)
    ids, mask = C.tokenize("mild atrophy", 5, 32)
    out = C.masked_mean(enc(ids, mask), mask).sum()
    T.backward(out)
    assert enc.tok.weight.grad is not None and np.any(enc.tok.weight.grad != 0)


# -- fusion -----------------------------------------------------------------
def test_fuse_text_shapes_and_passthrough(encoders, rng):
    e = encoders.embed(C.build_prompt(rec()))
    proj = C.TextProjector(128, 64, rng)
    h_clip = Tensor(e.h_clip[None])
    fused = C.fuse_text(h_clip, Tensor(e.h_t5[None]), proj)
    assert fused.shape == (1, 48, 64)
    assert fused.data[0, :16].tobytes() == e.h_clip.tobytes()


def test_fuse_text_zero_mlp_gives_bias_rows(rng):
    proj = C.TextProjector(6, 4, rng)
    nn.randomize_(proj, rng)
    proj.mlp.fc2.weight.data[:] = 0.0
    fused = C.fuse_text(Tensor(rng.standard_normal((1, 2, 4))), Tensor(rng.standard_normal((1, 3, 6))), proj)
    assert np.array_equal(fused.data[0, 2:], np.tile(proj.mlp.fc2.bias.data, (3, 1)))


def test_fuse_text_dimension_mismatch(rng):
    proj = C.TextProjector(6, 5, rng)
    with pytest.raises(T.ContractError):
        C.fuse_text(Tensor(np.ones((1, 2, 4))), Tensor(np.ones((1, 3, 6))), proj)


# -- metadata ---------------------------------------------------------------
def ranges():
    names = C.amd_feature_names()
    lo = {n: 0.0 for n in names}
    hi = {n: 10.0 for n in names}
    lo.update(age=55.0, sex=0.0, education=6.0)
    hi.update(age=90.0, sex=1.0, education=20.0)
    return C.FeatureRanges(lo, hi)


def test_minmax_examples():
    r = ranges()
    assert C.minmax_normalize(55.0, r, "age") == 0.0
    assert C.minmax_normalize(90.0, r, "age") == 1.0
    assert abs(C.minmax_normalize(72.7, r, "age") - (72.7 - 55) / 35) < 1e-15
    assert abs(C.minmax_normalize(72.7, r, "age") - 0.5057142857) < 1e-9
    assert C.minmax_normalize(120.0, r, "age") == 1.0 and C.minmax_normalize(0.0, r, "age") == 0.0


def test_minmax_degenerate_flags():
    r = C.FeatureRanges({"x": 3.0}, {"x": 3.0})
    assert C.minmax_normalize(3.0, r, "x") == 0.5
    assert "x" in r.degenerate


def test_fit_uses_only_given_rows_and_records_source():
    r = C.FeatureRanges.fit([{"a": 1.0}, {"a": 4.0}, {"a": None}], ["a"], fit_source="train")
    assert (r.mins["a"], r.maxs["a"], r.fit_source) == (1.0, 4.0, "train")


def test_ranges_roundtrip(tmp_path):
    r = ranges()
    r.save(tmp_path / "r.tsv")
    back = C.FeatureRanges.load(tmp_path / "r.tsv")
    assert back.mins == r.mins and back.maxs == r.maxs and back.fit_source == "train"


def test_build_amd_minima_and_layout():
    r = ranges()
    demo = {"age": 55.0, "sex": 0.0, "education": 6.0}
    amd = C.build_amd(demo, 0.0, {s: 0.0 for s in C.SCORE_NAMES}, r).amd
    n = len(C.DEMOGRAPHIC_NAMES) + 1 + 13
    assert len(amd) == n + 13 == C.AMD_DIM
    assert np.all(amd[:n] == 0.0) and np.all(amd[n:] == 1.0)


def test_build_amd_missing_scores():
    r = ranges()
    amd = C.build_amd({"age": 60.0, "sex": 1.0, "education": 12.0}, 12.0, {"MMSE": 5.0}, r).amd
    mmse = C.SCORE_NAMES.index("MMSE")
    assert amd[4 + mmse] == 0.5 and amd[17 + mmse] == 1.0
    others = [i for i in range(13) if i != mmse]
    assert np.all(amd[4 + np.array(others)] == 0.5) and np.all(amd[17 + np.array(others)] == 0.0)
    assert np.all((amd >= 0) & (amd <= 1))


def test_score_delta_is_arithmetic_difference():
    from progdit.dataio import score_deltas
    assert score_deltas({"MMSE": 28.0}, {"MMSE": 24.0})["MMSE"] == -4.0


# -- global conditioning ------------------------------------------------------
def test_global_conditioning_zero_mlp_is_t_emb(rng):
    emb = C.MetadataEmbedder(10, 8, rng)
    for lin in (emb.mlp.fc1, emb.mlp.fc2):
        lin.weight.data[:] = 0.0
        lin.bias.data[:] = 0.0
    t_emb = C.TimestepEmbedder(8, rng)(np.array([5.0]))
    g = C.global_conditioning(Tensor(rng.standard_normal((1, 4))), Tensor(rng.uniform(0, 1, (1, 4))),
                              Tensor(rng.uniform(0, 1, (1, 2))), t_emb, emb)
    assert g.v_meta.shape == (1, 10)
    assert np.array_equal(g.c_global.data, t_emb.data)


def test_global_conditioning_dimension_mismatch(rng):
    emb = C.MetadataEmbedder(10, 8, rng)
    with pytest.raises(T.DimensionError):
        C.global_conditioning(Tensor(np.ones((1, 4))), Tensor(np.ones((1, 4))), Tensor(np.ones((1, 3))),
                              Tensor(np.zeros((1, 8))), emb)


def test_global_conditioning_width_is_four_hidden(rng):
    emb = C.MetadataEmbedder(10, 8, rng)
    assert emb.mlp.fc1.weight.shape == (10, 32) and emb.mlp.fc2.weight.shape == (32, 8)


def test_c_global_gradcheck_wrt_amd(rng):
    emb = C.MetadataEmbedder(4 + 4 + C.AMD_DIM, 8, rng)
    nn.randomize_(emb, rng)
    y, v_res = Tensor(rng.standard_normal((2, 4))), Tensor(rng.uniform(0, 1, (2, 4)))
    amd = Tensor(rng.uniform(0, 1, (2, C.AMD_DIM)))
    t_emb = Tensor(rng.standard_normal((2, 8)))
    w = Tensor(rng.uniform(0.5, 1.5, (2, 8)))
    f = lambda: (C.global_conditioning(y, v_res, amd, t_emb, emb).c_global * w).sum()  # noqa: E731
    assert T.grad_check(f, amd) < 1e-4


def test_resolution_vector_bounds():
    v = C.resolution_vector((256, 256), (256, 256))
    assert v.shape == (4,) and np.all((v >= 0) & (v <= 1))
