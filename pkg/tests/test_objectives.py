"""Loss terms checked against closed forms, enumeration, and finite differences."""

import itertools
import math

import numpy as np
import pytest

from fatspeech import numerics as nm
from fatspeech.corpus import Batch, Example
from fatspeech.errors import DataError
from fatspeech.masking import mask_span
from fatspeech.model import FATModel
from fatspeech.numerics import Tape, Tensor, grad_check, log_softmax
from fatspeech.objectives import (
    ctc_loss, loss_ctc_batch, loss_fat_mlm, loss_fat_st, loss_masked_tokens,
    loss_seq2seq, loss_speech_recon,
)
from tests.conftest import synthetic_example, tiny_model_config


def enumerate_ctc(lp, labels):
    """Sum path probabilities by explicit enumeration and collapse."""
    t_len, n_sym = lp.shape
    blank = n_sym - 1
    probs = []
    for path in itertools.product(range(n_sym), repeat=t_len):
        merged = [k for k, _ in itertools.groupby(path)]
        collapsed = [k for k in merged if k != blank]
        if collapsed == list(labels):
            probs.append(math.exp(sum(lp[t, path[t]] for t in range(t_len))))
    p = math.fsum(probs)
    return math.inf if p == 0.0 else -math.log(p)


def random_log_probs(rng, t_len, n_sym):
    x = rng.normal(size=(t_len, n_sym))
    return x - np.log(np.exp(x).sum(axis=1, keepdims=True))


class TestSpeechRecon:
    def test_constant_offset_closed_form(self):
        target = np.zeros((6, 80))
        recon = Tensor(np.full((6, 80), 2.0))
        loss = loss_speech_recon(recon, target, np.ones(6, dtype=np.int8))
        assert loss.item() == pytest.approx(4.0 * 80)

    def test_only_masked_frames_counted(self):
        rng = np.random.default_rng(0)
        target = rng.normal(size=(8, 5))
        recon_data = target.copy()
        recon_data[3] += 1.0   # masked, contributes 5 * 1^2
        recon_data[6] += 99.0  # unmasked, must not matter
        ind = np.zeros(8, dtype=np.int8)
        ind[3] = 1
        loss = loss_speech_recon(Tensor(recon_data), target, ind)
        assert loss.item() == pytest.approx(5.0)

    def test_nothing_masked_is_none(self):
        assert loss_speech_recon(Tensor(np.zeros((4, 3))), np.zeros((4, 3)),
                                 np.zeros(4, dtype=np.int8)) is None

    def test_unmasked_gradient_exactly_zero(self):
        rng = np.random.default_rng(1)
        target = rng.normal(size=(10, 6))
        recon = Tensor(rng.normal(size=(10, 6)), requires_grad=True)
        ind = np.array([1, 0, 1, 1, 0, 0, 0, 1, 0, 0], dtype=np.int8)
        with Tape() as tape:
            loss = loss_speech_recon(recon, target, ind)
            tape.backward(loss)
        unmasked = np.flatnonzero(ind == 0)
        assert np.all(recon.grad[unmasked] == 0.0)
        masked = np.flatnonzero(ind)
        assert np.all(np.abs(recon.grad[masked]) > 0)

    def test_gradient_matches_finite_differences(self):
        rng = np.random.default_rng(2)
        target = rng.normal(size=(5, 4))
        ind = np.array([1, 0, 1, 0, 1], dtype=np.int8)
        point = Tensor(rng.normal(size=(5, 4)), requires_grad=True)
        report = grad_check(lambda r: loss_speech_recon(r, target, ind), point)
        assert report.passed, report.max_rel_err


class TestMaskedTokens:
    def test_uniform_logits_give_log_vocab(self):
        logits = Tensor(np.zeros((6, 12)))
        ind = np.ones(6, dtype=np.int8)
        loss = loss_masked_tokens(logits, [3] * 6, ind)
        assert loss.item() == pytest.approx(math.log(12))

    def test_unmasked_rows_ignored(self):
        rng = np.random.default_rng(3)
        logits_data = rng.normal(size=(5, 9))
        ind = np.array([0, 1, 0, 1, 0], dtype=np.int8)
        a = loss_masked_tokens(Tensor(logits_data), [1, 2, 3, 4, 5], ind)
        wrecked = logits_data.copy()
        wrecked[[0, 2, 4]] = 1e3
        b = loss_masked_tokens(Tensor(wrecked), [1, 2, 3, 4, 5], ind)
        assert a.item() == pytest.approx(b.item())

    def test_nothing_masked_is_none(self):
        assert loss_masked_tokens(Tensor(np.zeros((3, 4))), [0, 1, 2],
                                  np.zeros(3, dtype=np.int8)) is None

    def test_gradient_matches_finite_differences(self):
        rng = np.random.default_rng(4)
        ind = np.array([1, 1, 0, 1], dtype=np.int8)
        point = Tensor(rng.normal(size=(4, 7)), requires_grad=True)
        report = grad_check(
            lambda t: loss_masked_tokens(t, [2, 5, 0, 6], ind), point)
        assert report.passed, report.max_rel_err


class TestCTC:
    def test_two_frame_hand_value(self):
        # uniform over {label, blank}: paths aa, a-, -a carry 3/4 of the mass
        lp = Tensor(np.full((2, 2), math.log(0.5)))
        loss, feasible = ctc_loss(lp, [0])
        assert feasible
        assert loss.item() == pytest.approx(-math.log(0.75), abs=1e-12)

    def test_empty_label_is_all_blank_path(self):
        rng = np.random.default_rng(5)
        lp_data = random_log_probs(rng, 3, 4)
        loss, feasible = ctc_loss(Tensor(lp_data), [])
        assert feasible
        assert loss.item() == pytest.approx(-lp_data[:, 3].sum())

    def test_too_short_is_infeasible(self):
        lp = Tensor(np.full((2, 3), math.log(1 / 3)))
        loss, feasible = ctc_loss(lp, [0, 0])  # repeat needs 3 frames
        assert not feasible
        assert math.isinf(loss.item())
        assert not loss.requires_grad

    def test_exact_fit_single_path(self):
        rng = np.random.default_rng(6)
        lp_data = random_log_probs(rng, 3, 3)
        loss, feasible = ctc_loss(Tensor(lp_data), [0, 0])
        assert feasible
        # only path: 0, blank, 0
        want = -(lp_data[0, 0] + lp_data[1, 2] + lp_data[2, 0])
        assert loss.item() == pytest.approx(want, abs=1e-10)

    def test_label_out_of_range_rejected(self):
        with pytest.raises(DataError):
            ctc_loss(Tensor(np.zeros((3, 3))), [2])  # 2 is the blank column

    def test_matches_enumeration(self):
        rng = np.random.default_rng(7)
        for t_len in range(1, 6):
            for v in range(1, 4):
                lp_data = random_log_probs(rng, t_len, v + 1)
                labels_pool = [[], [0]]
                if v > 1:
                    labels_pool += [[0, 1], [1, 0], [0, 0], [1, 1, 0]]
                for labels in labels_pool:
                    loss, feasible = ctc_loss(Tensor(lp_data), labels)
                    want = enumerate_ctc(lp_data, labels)
                    if math.isinf(want):
                        assert not feasible
                    else:
                        assert feasible
                        assert loss.item() == pytest.approx(want, abs=1e-9), \
                            (t_len, v, labels)

    def test_gradient_matches_finite_differences(self):
        rng = np.random.default_rng(8)
        point = Tensor(random_log_probs(rng, 5, 4), requires_grad=True)
        report = grad_check(lambda t: ctc_loss(t, [0, 2, 0])[0], point)
        assert report.passed, report.max_rel_err

    def test_gradient_rows_sum_to_minus_one(self):
        # every path emits exactly one symbol per frame, so the posterior
        # over symbols is a distribution at each frame
        rng = np.random.default_rng(9)
        lp = Tensor(random_log_probs(rng, 6, 4), requires_grad=True)
        with Tape() as tape:
            loss, _ = ctc_loss(lp, [1, 0])
            tape.backward(loss)
        np.testing.assert_allclose(lp.grad.sum(axis=1), -1.0, atol=1e-10)

    def test_gradient_through_log_softmax(self):
        rng = np.random.default_rng(10)
        point = Tensor(rng.normal(size=(4, 3)), requires_grad=True)
        report = grad_check(lambda t: ctc_loss(log_softmax(t), [0, 1])[0],
                            point)
        assert report.passed, report.max_rel_err


def st_batch(rng, n=2, **kw):
    exs = [synthetic_example(rng, uid=f"u{i}", **kw) for i in range(n)]
    return Batch(flavor="sxy", examples=exs)


@pytest.fixture
def model64():
    return FATModel(tiny_model_config(), seed=4)


class TestSeq2Seq:
    def test_token_mean_pools_across_examples(self, model64):
        rng = np.random.default_rng(11)
        exs = [synthetic_example(rng, uid=f"u{i}") for i in range(3)]
        pooled = loss_seq2seq(model64, exs, "text").item()
        sums, tokens = 0.0, 0
        for ex in exs:
            n = len(ex.tgt_ids) + 1
            sums += loss_seq2seq(model64, [ex], "text").item() * n
            tokens += n
        assert pooled == pytest.approx(sums / tokens, rel=1e-10)

    def test_speech_and_text_sources_differ(self, model64):
        rng = np.random.default_rng(12)
        exs = [synthetic_example(rng)]
        a = loss_seq2seq(model64, exs, "speech").item()
        b = loss_seq2seq(model64, exs, "text").item()
        assert a != pytest.approx(b)

    def test_empty_batch_rejected(self, model64):
        with pytest.raises(DataError):
            loss_seq2seq(model64, [], "text")

    def test_smoothing_changes_loss(self, model64):
        rng = np.random.default_rng(13)
        exs = [synthetic_example(rng)]
        plain = loss_seq2seq(model64, exs, "text").item()
        smooth = loss_seq2seq(model64, exs, "text", smoothing=0.1).item()
        assert plain != pytest.approx(smooth)

    def test_gradient_reaches_decoder_and_encoder(self, model64):
        rng = np.random.default_rng(14)
        exs = [synthetic_example(rng, t=8, n_src=3, n_tgt=3)]
        for name in model64.parameters():
            model64.p(name).requires_grad = True
        with Tape() as tape:
            loss = loss_seq2seq(model64, exs, "speech")
            tape.backward(loss)
        assert model64.p("dec.0.cross.wq.w").grad is not None
        assert model64.p("conv.0.w").grad is not None


class TestFatMLM:
    def test_parts_follow_flavor(self, model64):
        rng = np.random.default_rng(15)
        # step 0 / seed 0 masks at least one position on each side of this
        # example, so all three terms materialize
        full = synthetic_example(rng, uid="a", t=12, n_src=10, n_tgt=10)
        bd = loss_fat_mlm(model64, [full], step=0, seed=0)
        assert set(bd.parts) == {"s", "x", "y"}
        speech_only = Example(uid="b", feats=full.feats)
        bd = loss_fat_mlm(model64, [speech_only], step=0, seed=0)
        assert set(bd.parts) == {"s"}
        text_pair = Example(uid="c", src_ids=[5, 6, 7, 8, 9, 10],
                            tgt_ids=[11, 12, 13, 14, 15, 16])
        bd = loss_fat_mlm(model64, [text_pair], step=0, seed=0)
        assert set(bd.parts) <= {"x", "y"} and bd.parts

    def test_deterministic_given_step_and_seed(self, model64):
        rng = np.random.default_rng(16)
        exs = [synthetic_example(rng, uid=f"u{i}", t=16) for i in range(2)]
        a = loss_fat_mlm(model64, exs, step=3, seed=9)
        b = loss_fat_mlm(model64, exs, step=3, seed=9)
        assert a.total.item() == b.total.item()
        c = loss_fat_mlm(model64, exs, step=4, seed=9)
        assert a.total.item() != pytest.approx(c.total.item())

    def test_report_total_is_part_sum(self, model64):
        rng = np.random.default_rng(17)
        exs = [synthetic_example(rng, uid=f"u{i}", t=14) for i in range(2)]
        bd = loss_fat_mlm(model64, exs, step=0, seed=0)
        assert bd.report_total == pytest.approx(
            math.fsum(bd.parts.values()), abs=0)
        assert bd.total.item() == pytest.approx(bd.report_total, rel=1e-9)

    def test_masked_speech_gradient_confined_to_mask(self, model64):
        rng = np.random.default_rng(18)
        feats = rng.normal(size=(12, 8))
        plan = mask_span(12, 0.4, 3, seed=5)
        with Tape() as tape:
            fused = model64.fuse_encode(
                speech=model64.acoustic_embed(feats, plan=plan))
            recon = model64.reconstruct_speech(fused, 12)
            loss = loss_speech_recon(recon, feats, plan.indicator)
            tape.backward(loss)
        unmasked = np.flatnonzero(plan.indicator == 0)
        assert np.all(recon.grad[unmasked] == 0.0)

    def test_gradient_reaches_learned_mask_vectors(self, model64):
        rng = np.random.default_rng(19)
        exs = [synthetic_example(rng, uid="u", t=16, n_src=5, n_tgt=5)]
        for name in ("eps.frame", "eps.token"):
            model64.p(name).requires_grad = True
        with Tape() as tape:
            bd = loss_fat_mlm(model64, exs, step=2, seed=2)
            tape.backward(bd.total)
        assert model64.p("eps.frame").grad is not None
        assert model64.p("eps.token").grad is not None


class TestFatST:
    def test_st_stream_includes_ctc(self, model64):
        rng = np.random.default_rng(20)
        batch = st_batch(rng, n=2, t=20, n_src=3, n_tgt=3)
        bd = loss_fat_st(model64, batch, "st", step=0, seed=0)
        assert set(bd.parts) == {"st", "ctc"}
        assert bd.weights == {"st": 1.0, "ctc": 0.3}
        assert bd.report_total == pytest.approx(
            bd.parts["st"] + 0.3 * bd.parts["ctc"], abs=0)
        assert bd.total.item() == pytest.approx(bd.report_total, rel=1e-9)

    def test_st_without_transcripts_has_no_ctc(self, model64):
        rng = np.random.default_rng(21)
        exs = [synthetic_example(rng, uid=f"u{i}", t=16) for i in range(2)]
        for ex in exs:
            ex.src_ids = None
        bd = loss_fat_st(model64, Batch(flavor="sy", examples=exs), "st")
        assert set(bd.parts) == {"st"}

    def test_infeasible_transcripts_skipped(self, model64):
        rng = np.random.default_rng(22)
        # 8 frames -> 2 latent frames; 5 labels cannot fit
        ex = synthetic_example(rng, uid="long", t=8, n_src=5, n_tgt=3)
        bd = loss_fat_st(model64, Batch(flavor="sxy", examples=[ex]), "st")
        assert bd.ctc_skipped == 1
        assert "ctc" not in bd.parts

    def test_mt_stream(self, model64):
        rng = np.random.default_rng(23)
        batch = st_batch(rng, n=2)
        bd = loss_fat_st(model64, batch, "mt")
        assert set(bd.parts) == {"mt"}
        assert bd.report_total == pytest.approx(bd.parts["mt"], abs=0)

    def test_mlm_stream_scales_inner_terms(self, model64):
        rng = np.random.default_rng(24)
        batch = st_batch(rng, n=2, t=16)
        bd = loss_fat_st(model64, batch, "mlm", step=1, seed=1,
                         weights={"mlm": 0.5})
        inner = loss_fat_mlm(model64, batch.examples, step=1, seed=1)
        assert bd.parts == inner.parts
        assert all(w == 0.5 for w in bd.weights.values())
        assert bd.total.item() == pytest.approx(0.5 * inner.total.item(),
                                                rel=1e-9)

    def test_unknown_stream_rejected(self, model64):
        rng = np.random.default_rng(25)
        with pytest.raises(DataError):
            loss_fat_st(model64, st_batch(rng), "asr")

    def test_custom_weights_respected(self, model64):
        rng = np.random.default_rng(26)
        batch = st_batch(rng, n=1, t=20, n_src=2, n_tgt=3)
        bd = loss_fat_st(model64, batch, "st",
                         weights={"st": 2.0, "ctc": 0.1})
        assert bd.report_total == pytest.approx(
            2.0 * bd.parts["st"] + 0.1 * bd.parts["ctc"], abs=0)


class TestCTCBatch:
    def test_mean_over_feasible_only(self, model64):
        rng = np.random.default_rng(27)
        good = synthetic_example(rng, uid="g", t=20, n_src=2, n_tgt=2)
        bad = synthetic_example(rng, uid="b", t=8, n_src=5, n_tgt=2)
        loss, scored, skipped = loss_ctc_batch(model64, [good, bad])
        assert (scored, skipped) == (1, 1)
        solo, _, _ = loss_ctc_batch(model64, [good])
        assert loss.item() == pytest.approx(solo.item())

    def test_no_transcripts_returns_none(self, model64):
        rng = np.random.default_rng(28)
        ex = synthetic_example(rng, uid="u", t=16)
        ex.src_ids = None
        loss, scored, skipped = loss_ctc_batch(model64, [ex])
        assert loss is None and scored == 0 and skipped == 0
