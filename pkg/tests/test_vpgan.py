import math

import numpy as np
import pytest
import torch

from stainforge.errors import InputError
from stainforge.prompt_lab import ConceptAnchorSet, PromptBank
from stainforge.vpgan import (
    LossWeights,
    PromptGuidance,
    build_translator_pair,
    cca_loss,
    constant_similarity,
    cpt_loss,
    cycle_loss,
    icr_loss,
    icr_probabilities,
    icr_scores,
    l1_cycle,
    adversarial_value,
    load_vpgan_checkpoint,
    save_vpgan_checkpoint,
    train_vpgan,
    translate,
    vpgan_total_loss,
)

from support import directional_check, model_image

# Frozen from the standalone numpy oracle.
ICR_P0 = 0.7776095819886227
ICR_LOSS = 0.2515307033955965
CCA_E_MINUS_1_SQ = 2.9524924420125598


class EmbeddingBackend:
    """Backend whose image embedding is the flattened mean colour; text tokens pass through."""

    def encode_image(self, images):
        return images.mean(dim=(2, 3))

    def encode_text_tokens(self, tokens):
        return tokens.mean(0)


def colour(rgb, batch=1):
    return torch.tensor(rgb, dtype=torch.float64).view(1, 3, 1, 1).expand(batch, 3, 2, 2).clone()


def test_adversarial_examples():
    half = torch.full((4, 1, 3, 3), 0.5, dtype=torch.float64)
    assert float(adversarial_value(half, half)) == pytest.approx(2 * math.log(0.5), abs=1e-9)
    perfect = adversarial_value(torch.ones(2, 1, 3, 3), torch.zeros(2, 1, 3, 3))
    assert -1e-6 < float(perfect) <= 0
    with pytest.raises(InputError):
        adversarial_value(torch.ones(0), torch.ones(1))


@pytest.mark.parametrize("seed", range(5))
def test_adversarial_matches_scratch(seed):
    rng = np.random.default_rng(seed)
    real, fake = rng.uniform(0.01, 0.99, (3, 1, 4, 4)), rng.uniform(0.01, 0.99, (2, 1, 4, 4))
    want = np.mean(np.log(real)) + np.mean(np.log(1 - fake))
    got = adversarial_value(torch.from_numpy(real), torch.from_numpy(fake))
    assert float(got) == pytest.approx(want, abs=1e-10)


def test_cycle_examples():
    a = model_image(0, 8, batch=2)
    assert float(l1_cycle(a, a)) == 0.0
    assert float(l1_cycle(a + 0.1, a)) == pytest.approx(0.1, abs=1e-12)
    rng = np.random.default_rng(1)
    x, y = rng.normal(size=(2, 3, 4, 4)), rng.normal(size=(2, 3, 4, 4))
    total = 0.0
    for idx in np.ndindex(x.shape):
        total += abs(x[idx] - y[idx])
    assert float(l1_cycle(torch.from_numpy(x), torch.from_numpy(y))) == pytest.approx(total / x.size, abs=1e-12)
    with pytest.raises(InputError):
        l1_cycle(a, a[:1])


def test_cycle_loss_of_fresh_pair_is_small():
    # generators start near identity, so the round trip barely moves the input
    pair = build_translator_pair(0).double()
    a, b = model_image(1, 16, batch=2), model_image(2, 16, batch=2)
    with torch.no_grad():
        ca, cb = cycle_loss(pair, a, b)
    assert float(ca) < 0.2 and float(cb) < 0.2


def test_cpt_examples():
    e = torch.eye(3, dtype=torch.float64)
    img = colour([1.0, 0.0, 0.0])
    sym = PromptBank(e[1:2], e[2:3])
    assert float(cpt_loss(img, sym, EmbeddingBackend())) == pytest.approx(0.5, abs=1e-15)
    extreme = PromptBank(e[0:1], -e[0:1])
    want = 1 / (1 + math.e ** 2)
    assert float(cpt_loss(img, extreme, EmbeddingBackend())) == pytest.approx(want, abs=1e-9)


@pytest.mark.parametrize("seed", range(5))
def test_cpt_matches_scratch(seed, backend):
    gen = torch.Generator().manual_seed(seed)
    bank = PromptBank(torch.randn(4, 512, generator=gen, dtype=torch.float64),
                      torch.randn(4, 512, generator=gen, dtype=torch.float64))
    imgs = model_image(seed, 16, batch=3)
    e = backend.encode_image(imgs).numpy()
    tp = backend.encode_text_tokens(bank.positive).numpy()
    tn = backend.encode_text_tokens(bank.negative).numpy()
    cos = lambda a, b: a @ b / np.linalg.norm(a) / np.linalg.norm(b)  # noqa: E731
    want = np.mean([math.exp(cos(r, tn)) / (math.exp(cos(r, tn)) + math.exp(cos(r, tp))) for r in e])
    assert float(cpt_loss(imgs, bank, backend)) == pytest.approx(want, abs=1e-10)


def _anchor_set(constant, stains):
    return ConceptAnchorSet(constant=torch.as_tensor(constant, dtype=torch.float64),
                            stains=torch.as_tensor(stains, dtype=torch.float64), digests={})


def test_cca_examples():
    anchors = _anchor_set([1.0, 0.0, 0.0], np.eye(3)[[0, 1, 2, 0]])
    a = colour([1.0, 0.0, 0.0])
    b = colour([0.0, 1.0, 0.0])
    be = EmbeddingBackend()
    assert float(cca_loss(a, a, anchors, be)) == 0.0
    assert float(constant_similarity(a, anchors, be)) == pytest.approx(math.e)
    assert float(constant_similarity(b, anchors, be)) == pytest.approx(1.0)
    assert float(cca_loss(a, b, anchors, be)) == pytest.approx(CCA_E_MINUS_1_SQ, abs=1e-12)


@pytest.mark.parametrize("seed", range(5))
def test_cca_matches_scratch(seed, backend, anchors):
    pre, post = model_image(seed, 16, batch=2), model_image(seed + 50, 16, batch=2)
    c = anchors.constant.numpy()
    cos = lambda a, b: a @ b / np.linalg.norm(a) / np.linalg.norm(b)  # noqa: E731
    sp = [math.exp(cos(r, c)) for r in backend.encode_image(pre).numpy()]
    sq = [math.exp(cos(r, c)) for r in backend.encode_image(post).numpy()]
    want = np.mean((np.array(sp) - np.array(sq)) ** 2)
    assert float(cca_loss(pre, post, anchors, backend)) == pytest.approx(want, abs=1e-10)


def test_icr_examples():
    be = EmbeddingBackend()
    # all four anchors equal: the softmax is uniform
    uniform = _anchor_set([1.0, 0.0, 0.0], np.tile([[0.0, 1.0, 0.0]], (4, 1)))
    img = colour([1.0, 0.5, 0.0])
    assert float(icr_loss(img, uniform, 2, be)) == pytest.approx(math.log(4), abs=1e-9)
    one_hot = _anchor_set([1.0, 0.0, 0.0], [[1.0, 0, 0], [0, 1.0, 0], [0, 0, 1.0], [0, 1.0, 0]])
    img = colour([1.0, 0.0, 0.0])
    p = icr_probabilities(img, one_hot, be)[0]
    assert float(p[0]) == pytest.approx(math.exp(math.e) / (math.exp(math.e) + 3 * math.e), abs=1e-12)
    scores = icr_scores(img, one_hot, be, "cos")[0]
    assert torch.allclose(scores, torch.tensor([1.0, 0, 0, 0], dtype=torch.float64))
    with pytest.raises(InputError):
        icr_loss(img, one_hot, 4, be)
    with pytest.raises(InputError):
        icr_scores(img, one_hot, be, "logit")


def test_icr_oracle_values():
    be = EmbeddingBackend()
    # target anchor aligned with the image, the other three opposite
    anchors = _anchor_set([1.0, 0.0, 0.0], [[1.0, 0, 0], [-1.0, 0, 0], [-1.0, 0, 0], [-1.0, 0, 0]])
    img = colour([1.0, 0.0, 0.0])
    assert float(icr_probabilities(img, anchors, be)[0, 0]) == pytest.approx(ICR_P0, abs=1e-12)
    assert float(icr_loss(img, anchors, 0, be)) == pytest.approx(ICR_LOSS, abs=1e-12)


@pytest.mark.parametrize("seed", range(5))
def test_icr_matches_scratch(seed, backend, anchors):
    imgs = model_image(seed, 16, batch=3)
    e = backend.encode_image(imgs).numpy()
    s = anchors.stains.numpy()
    cos = e @ s.T / np.linalg.norm(e, axis=1, keepdims=True) / np.linalg.norm(s, axis=1)
    scores = np.exp(cos)
    p = np.exp(scores) / np.exp(scores).sum(1, keepdims=True)
    want = -np.mean(np.log(p[:, 1]))
    assert float(icr_loss(imgs, anchors, 1, backend)) == pytest.approx(want, abs=1e-10)


def test_total_loss_example():
    comps = {k: torch.tensor(1.0) for k in ("normal", "cpt", "cca", "icr")}
    assert float(vpgan_total_loss(comps, LossWeights())) == pytest.approx(31.2, abs=1e-5)
    with pytest.raises(InputError):
        LossWeights(alpha=-1)
    with pytest.raises(InputError):
        LossWeights(nu=float("nan"))


def test_translate_contract():
    pair = build_translator_pair(0)
    x = model_image(3, 32, batch=2).float()
    with torch.no_grad():
        out = translate(x, pair)
    assert out.shape == x.shape and out.min() >= -1 and out.max() <= 1
    assert float((out - x).abs().max()) < 0.2
    with torch.no_grad():
        back = translate(out, pair, "B->A")
    assert back.shape == x.shape
    with pytest.raises(InputError):
        translate(x[:, :2], pair)
    with pytest.raises(InputError):
        translate(x * 3, pair)
    with pytest.raises(InputError):
        translate(x, pair, "A->C")


def test_pairs_are_seeded():
    a, b = build_translator_pair(5), build_translator_pair(5)
    for (n, p), (_, q) in zip(a.state_dict().items(), b.state_dict().items()):
        assert torch.equal(p, q), n


@pytest.mark.parametrize("seed", range(3))
def test_prompt_losses_gradient_wrt_image(seed, backend, anchors):
    gen = torch.Generator().manual_seed(seed)
    bank = PromptBank(torch.randn(4, 512, generator=gen, dtype=torch.float64) * 0.1,
                      torch.randn(4, 512, generator=gen, dtype=torch.float64) * 0.1)
    pre = model_image(seed + 10, 8, batch=2)
    x = model_image(seed, 8, batch=2)
    assert directional_check(lambda v: cpt_loss(v, bank, backend), x, seed) < 1e-4
    assert directional_check(lambda v: cca_loss(pre, v, anchors, backend), x, seed) < 1e-4
    assert directional_check(lambda v: icr_loss(v, anchors, 1, backend), x, seed) < 1e-4


def _small_run(domain_images, weights, guidance, iterations=3, seed=4):
    return train_vpgan(domain_images["A"][:8].double(), domain_images["B"][:8].double(), weights,
                       guidance=guidance, iterations=iterations, batch_size=2, seed=seed,
                       ngf=8, n_blocks=1, ndf=8, eval_size=4)


def test_zero_weights_reproduce_cyclegan(domain_images, prompt_bank, anchors, backend):
    guidance = PromptGuidance(prompt_bank, anchors, backend, target=1)
    _, plain = _small_run(domain_images, LossWeights(0, 0, 0), None)
    _, guided = _small_run(domain_images, LossWeights(0, 0, 0), guidance)
    for p, g in zip(plain["trace"], guided["trace"]):
        for key in ("gan_a", "gan_b", "cyc_a", "cyc_b", "normal", "d_loss"):
            assert p[key] == g[key]
        assert g["total"] == p["total"]


def test_training_determinism_and_checkpoint(tmp_path, domain_images, prompt_bank, anchors, backend):
    guidance = PromptGuidance(prompt_bank, anchors, backend, target=1)
    one, r1 = _small_run(domain_images, LossWeights(), guidance)
    two, r2 = _small_run(domain_images, LossWeights(), guidance)
    assert r1["trace"] == r2["trace"]
    p1, p2 = tmp_path / "a.sfa", tmp_path / "b.sfa"
    save_vpgan_checkpoint(p1, r1["state"], {"seed": 4}, {"x": "y"}, r1["trace"])
    save_vpgan_checkpoint(p2, r2["state"], {"seed": 4}, {"x": "y"}, r2["trace"])
    assert p1.read_bytes() == p2.read_bytes()
    loaded, payload = load_vpgan_checkpoint(p1)
    x = domain_images["A_test"][:2].double()
    with torch.no_grad():
        assert torch.equal(loaded.G_AB(x), one.G_AB(x))
    assert payload["iteration"] == 3 and set(r1["trace"][0]) >= {"cpt", "cca", "icr"}


def test_training_rejects_empty_domain(domain_images):
    with pytest.raises(InputError):
        train_vpgan(domain_images["A"][:0], domain_images["B"], LossWeights(), iterations=1)
