import math

import numpy as np
import pytest
import torch

from mtlnmt.model import (
    ModelConfig,
    NumericalError,
    Seq2SeqTransformer,
    collate_mlm,
    collate_seq2seq,
    forward_dae,
    forward_mlm,
    forward_mt,
    gradients,
    smoothed_nll_sum,
    task_losses,
    translation_path_parameters,
)
from mtlnmt.noising import DAE, MLM, MT, NoisedExample
from oracles import (
    BOS,
    EOS,
    PAD,
    finite_difference_check,
    naive_mlm_loss,
    naive_seq2seq_loss,
    random_batches,
    random_examples,
    tiny_model,
)


def test_config_validation():
    with pytest.raises(ValueError):
        ModelConfig(vocab_size=10, d_model=10, heads=4)
    with pytest.raises(ValueError):
        ModelConfig(vocab_size=10, label_smoothing=1.0)


@pytest.mark.parametrize("eps", [0.0, 0.1, 0.5])
def test_uniform_logits_give_log_v(eps):
    m = tiny_model(label_smoothing=eps)
    with torch.no_grad():
        # zero final layer norm -> zero decoder logits; zero head -> zero MLM logits
        m.dec_ln.weight.zero_()
        m.dec_ln.bias.zero_()
        m.mlm_head.weight.zero_()
        m.mlm_head.bias.zero_()
    _, b = random_batches()
    with torch.no_grad():
        assert float(forward_mt(m, b[MT])[1]) == pytest.approx(math.log(11), abs=1e-12)
        assert float(forward_dae(m, b[DAE])) == pytest.approx(math.log(11), abs=1e-12)
        single = NoisedExample([4, 7, 8], [9, 7, 8], [True, False, False], MLM)
        assert float(forward_mlm(m, collate_mlm([single], PAD))) == pytest.approx(math.log(11), abs=1e-12)


def test_peaked_logits_loss_near_zero():
    target = torch.tensor([[3, 1, 4]])
    logits = 50.0 * torch.nn.functional.one_hot(target, 11).double()
    total, n = smoothed_nll_sum(logits, target, torch.ones_like(target, dtype=torch.bool), 0.0)
    assert n == 3
    assert float(total) / n < 1e-20
    # with smoothing the floor is eps times the mean negative log-prob of the other classes
    total, _ = smoothed_nll_sum(logits, target, torch.ones_like(target, dtype=torch.bool), 0.1)
    assert float(total) / 3 == pytest.approx(0.1 * 50.0 * 10 / 11, rel=1e-9)


@pytest.mark.parametrize("seed", [0, 1, 2])
def test_losses_match_naive_loops(seed):
    m = tiny_model(seed)
    ex, b = random_batches(seed, n=4)
    with torch.no_grad():
        assert float(forward_mt(m, b[MT])[1]) == pytest.approx(naive_seq2seq_loss(m, ex[MT], 0.1), abs=1e-10)
        assert float(forward_dae(m, b[DAE])) == pytest.approx(naive_seq2seq_loss(m, ex[DAE], 0.1), abs=1e-10)
        assert float(forward_mlm(m, b[MLM])) == pytest.approx(naive_mlm_loss(m, ex[MLM], 0.1), abs=1e-10)


def test_mlm_all_false_mask_is_zero_and_counted():
    m = tiny_model()
    ex = [NoisedExample([6, 7], [6, 7], [False, False], MLM)]
    before = m.empty_mlm_batches
    assert float(forward_mlm(m, collate_mlm(ex, PAD)).detach()) == 0.0
    assert m.empty_mlm_batches == before + 1


def test_output_distributions_normalized():
    m = tiny_model()
    _, b = random_batches()
    logp, _ = forward_mt(m, b[MT])
    assert torch.allclose(logp.exp().sum(-1), torch.ones(logp.shape[:2], dtype=logp.dtype), atol=1e-6)


def test_loss_additivity_exact():
    m = tiny_model()
    _, b = random_batches()
    losses = task_losses(m, b)
    assert losses.total.item() == (losses.mt + losses.mlm + losses.dae).item()
    g_total = gradients(m, task_losses(m, b).total)
    parts = [gradients(m, getattr(task_losses(m, b), n)) for n in ("mt", "mlm", "dae")]
    for name, g in g_total.items():
        assert torch.allclose(g, parts[0][name] + parts[1][name] + parts[2][name], rtol=0, atol=1e-12)


def test_absent_task_contributes_zero():
    m = tiny_model()
    _, b = random_batches()
    losses = task_losses(m, {MT: b[MT]})
    assert float(losses.mlm) == 0.0 and float(losses.dae) == 0.0
    g = gradients(m, losses.mlm)
    assert all(float(t.abs().max()) == 0.0 for t in g.values())


def test_mlm_head_gets_no_gradient_from_mt_or_dae():
    m = tiny_model()
    _, b = random_batches()
    for name in ("mt", "dae"):
        g = gradients(m, getattr(task_losses(m, b), name))
        assert float(g["mlm_head.weight"].abs().max()) == 0.0
        assert float(g["mlm_head.bias"].abs().max()) == 0.0
    g = gradients(m, task_losses(m, b).mlm)
    assert float(g["mlm_head.weight"].abs().max()) > 0.0


def test_mlm_head_isolation_bitwise():
    m = tiny_model()
    _, b = random_batches()
    with torch.no_grad():
        before = m(b[MT].src, b[MT].tgt_in).clone()
        m.mlm_head.weight.normal_(0, 10)
        m.mlm_head.bias.normal_(0, 10)
        after = m(b[MT].src, b[MT].tgt_in)
    assert torch.equal(before, after)
    assert "mlm_head.weight" not in translation_path_parameters(m)


def test_causal_probe():
    m = tiny_model()
    rng = np.random.default_rng(0)
    src = torch.tensor([[6, 7, 8, 5]])
    tgt = torch.tensor([[BOS, 6, 7, 8, 9, 10]])
    with torch.no_grad():
        base = m(src, tgt)
        for t in range(tgt.shape[1] - 1):
            changed = tgt.clone()
            changed[0, t + 1:] = torch.from_numpy(rng.integers(6, 11, tgt.shape[1] - t - 1))
            out = m(src, changed)
            assert torch.equal(out[0, : t + 1], base[0, : t + 1])


def test_padding_does_not_change_real_positions():
    m = tiny_model()
    ex = random_examples(MT, 1, np.random.default_rng(3))
    alone = collate_seq2seq(ex, PAD, BOS, EOS)
    longer = NoisedExample([6] * 9, [7] * 9, [True] * 9, MT, "xx")
    padded = collate_seq2seq(ex + [longer], PAD, BOS, EOS)
    with torch.no_grad():
        a = m(alone.src, alone.tgt_in)[0]
        p = m(padded.src, padded.tgt_in)[0, : a.shape[0]]
    assert torch.allclose(a, p, atol=1e-12)


def test_non_finite_loss_raises():
    m = tiny_model()
    _, b = random_batches()
    with torch.no_grad():
        m.embed.weight[6] = float("nan")
    with pytest.raises(NumericalError):
        forward_mt(m, b[MT])


def test_max_len_enforced():
    m = tiny_model(max_len=4)
    with pytest.raises(ValueError):
        m.encode(torch.ones(1, 5, dtype=torch.long))


def test_finite_difference_gradients():
    m = tiny_model()
    _, b = random_batches()
    errors, _ = finite_difference_check(m, b)
    for name, err in errors.items():
        assert err < 1e-4, (name, err)
