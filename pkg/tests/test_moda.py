import numpy as np
import pytest
from hypothesis import given
import hypothesis.strategies as st
from hypothesis.extra.numpy import arrays

from app.errors import NonFiniteError
from app.models import (AugmentSpec, DataSection, LossSection, ModelSection, OptimSection, RunRecord, RunSection,
                        ShiftSpec, TrainConfig)
from app.services import autodiff as ad
from app.services.augment import Augmentation
from app.services.data_service import BatchBundle, generate_domains, split_domains
from app.services.moda import (LossWeights, MixtureWeights, ModaModel, ModaTrainer, alpha_trajectory, class_loss,
                               compute_objective, consistency_loss, consistency_terms, disc_loss, sparsity_term,
                               train_step)
from app.services.nn import OptimizerState, optimizer_step


def tiny_config(mode="moda_fm", **loss):
    values = dict(mu_d=0.3, mu_s=0.2, mu_c=0.5, tau=0.0)
    values.update(loss)
    return TrainConfig(
        model=ModelSection(extractor_hidden=[3], classifier_hidden=[], discriminator_hidden=[]),
        loss=LossSection(**values),
        augment=AugmentSpec(kind="none"),
        optim=OptimSection(kind="sgd", learning_rate=0.1),
        run=RunSection(mode=mode, epochs=2, batch_size=4, seed=0),
        data=DataSection(shift=ShiftSpec(num_sources=2, classes=2, dim=2, samples_per_domain=16, test_samples=8)),
    )


def tiny_model(config, seed=0, num_sources=2):
    return ModaModel(2, 2, num_sources, config.model, np.random.default_rng(seed))


def tiny_batches(seed=0, num_sources=2, m=4):
    rng = np.random.default_rng(seed)
    return BatchBundle(
        source_x=[rng.standard_normal((m, 2)) for _ in range(num_sources)],
        source_y=[rng.integers(0, 2, m) for _ in range(num_sources)],
        target_x=rng.standard_normal((m, 2)),
        target_indices=np.arange(m),
        source_indices=[np.arange(m) for _ in range(num_sources)],
    )


def numpy_logits(model, x):
    h = x
    for layer in model.extractor.layers:
        h = np.maximum(h @ layer.weight.value.T + layer.bias.value, 0.0)
    for i, layer in enumerate(model.classifier.layers):
        h = h @ layer.weight.value.T + layer.bias.value
        if i < len(model.classifier.layers) - 1:
            h = np.maximum(h, 0.0)
    return h


def mean_cross_entropy(logits, labels):
    shifted = logits - logits.max(axis=1, keepdims=True)
    log_probs = shifted - np.log(np.exp(shifted).sum(axis=1, keepdims=True))
    return float(-np.mean(log_probs[np.arange(len(labels)), labels]))


# --- mixture weights ----------------------------------------------------------

def test_alpha_follows_beta_on_every_access(rng):
    mixture = MixtureWeights(3, rng)
    mixture.beta.assign([0.0, np.log(2.0), np.log(5.0)])
    np.testing.assert_allclose(mixture.alpha, [0.125, 0.25, 0.625], atol=1e-15)
    assert abs(mixture.alpha.sum() - 1.0) < 1e-12


def test_initial_alpha_is_near_uniform_across_seeds():
    deviations, alphas = [], []
    for seed in range(1000):
        alpha = MixtureWeights(3, np.random.default_rng(seed)).alpha
        alphas.append(alpha)
        deviations.append(np.max(np.abs(alpha - 1.0 / 3)))
    deviations = np.asarray(deviations)
    np.testing.assert_allclose(np.mean(alphas, axis=0), [1.0 / 3] * 3, atol=0.02)
    assert np.mean(deviations <= 0.15) >= 0.75
    # beta in [0, 1] caps the deviation at e / (e + M - 1) - 1 / M
    assert np.all(deviations <= np.e / (np.e + 2) - 1.0 / 3 + 1e-12)


def test_fixed_mixture_is_uniform_and_frozen(rng):
    mixture = MixtureWeights(4, rng, learnable=False)
    np.testing.assert_allclose(mixture.alpha, [0.25] * 4)
    assert not mixture.beta.requires_grad


# --- loss terms ---------------------------------------------------------------

def test_class_loss_with_one_hot_alpha_is_plain_cross_entropy():
    config = tiny_config()
    model = tiny_model(config)
    batches = tiny_batches()
    model.mixture.beta.assign([60.0, -60.0])
    expected = mean_cross_entropy(numpy_logits(model, batches.source_x[0]), batches.source_y[0])
    assert abs(class_loss(model, batches).item() - expected) < 1e-10


def test_class_loss_mixes_domain_losses_by_alpha():
    config = tiny_config()
    model = tiny_model(config)
    batches = tiny_batches(seed=3)
    model.mixture.beta.assign(np.log([0.3, 0.7]))
    per_domain = [mean_cross_entropy(numpy_logits(model, x), y) for x, y in zip(batches.source_x, batches.source_y)]
    assert abs(class_loss(model, batches).item() - (0.3 * per_domain[0] + 0.7 * per_domain[1])) < 1e-10


def test_class_loss_ignores_alpha_for_identical_domains():
    config = tiny_config()
    model = tiny_model(config)
    batches = tiny_batches()
    batches.source_x[1] = batches.source_x[0]
    batches.source_y[1] = batches.source_y[0]
    model.mixture.beta.assign([0.1, 0.9])
    first = class_loss(model, batches).item()
    model.mixture.beta.assign([2.0, -1.0])
    assert abs(class_loss(model, batches).item() - first) < 1e-12


def test_class_loss_rejects_out_of_range_label():
    config = tiny_config()
    model = tiny_model(config)
    batches = tiny_batches()
    batches.source_y[0] = np.array([0, 1, 2, 0])
    with pytest.raises(ValueError):
        class_loss(model, batches)


def test_uniform_discriminator_gives_two_ln_two():
    config = tiny_config()
    model = tiny_model(config)
    batches = tiny_batches()
    batches.target_x = batches.source_x[0]
    for param in model.discriminator.parameters():
        param.assign(np.zeros(param.shape))
    assert abs(disc_loss(model, batches).item() - 2.0 * np.log(2.0)) < 1e-9


def test_consistency_hand_example():
    clean = np.zeros((8, 2))
    clean[0] = np.log([0.95, 0.05])
    augmented = ad.constant(np.zeros((8, 2)))
    loss, masked, pseudo = consistency_terms(clean, augmented, tau=0.9)
    assert abs(loss.item() - np.log(2.0) / 8) < 1e-12
    assert abs(loss.item() - 0.08664) < 1e-5
    assert masked == 1.0 / 8
    assert pseudo[0] == 0


def test_consistency_is_exactly_zero_below_threshold():
    clean = np.zeros((5, 3))
    loss, masked, _ = consistency_terms(clean, ad.constant(np.ones((5, 3))), tau=0.9)
    assert loss.item() == 0.0
    assert masked == 0.0


@given(arrays(np.float64, (6, 3), elements=st.floats(-5, 5)), st.floats(-100, 100))
def test_pseudo_labels_ignore_additive_logit_shift(logits, shift):
    _, _, base = consistency_terms(logits, ad.constant(logits), tau=0.5)
    _, _, shifted = consistency_terms(logits + shift, ad.constant(logits), tau=0.5)
    np.testing.assert_array_equal(base, shifted)


@given(arrays(np.float64, (10, 3), elements=st.floats(-4, 4)))
def test_masked_fraction_is_non_increasing_in_tau(logits):
    fractions = [consistency_terms(logits, ad.constant(logits), tau)[1] for tau in np.linspace(0.0, 1.0, 11)]
    assert all(a >= b for a, b in zip(fractions, fractions[1:]))


def test_consistency_gradient_only_flows_through_transformed_pass():
    config = tiny_config()
    model = tiny_model(config)
    x = np.random.default_rng(5).standard_normal((6, 2))
    weight = model.classifier.layers[0].weight

    def objective():
        return consistency_loss(model, x, Augmentation(x), tau=0.0)[0].item()

    model.params.zero_grad()
    ad.backward(consistency_loss(model, x, Augmentation(x), tau=0.0)[0])
    numeric = ad.numerical_gradient(objective, weight)
    np.testing.assert_allclose(weight.grad, numeric, rtol=1e-4, atol=1e-7)


@pytest.mark.parametrize("alpha, expected", [
    ([0.25, 0.25, 0.25, 0.25], 0.25),
    ([0.5, 0.25, 0.25], 0.375),
])
def test_sparsity_term_values(rng, alpha, expected):
    mixture = MixtureWeights(len(alpha), rng)
    mixture.beta.assign(np.log(alpha))
    assert abs(sparsity_term(mixture, 0.4).item() - 0.4 * expected) < 1e-12


def test_sparsity_term_one_hot(rng):
    mixture = MixtureWeights(2, rng)
    mixture.beta.assign([80.0, -80.0])
    assert abs(sparsity_term(mixture, 0.7).item() - 0.7) < 1e-12


# --- full objective -----------------------------------------------------------

def test_full_objective_gradients_match_finite_differences():
    config = tiny_config(mu_d=0.3, mu_s=0.2, mu_c=0.5, tau=0.0)
    model = tiny_model(config, seed=2)
    batches = tiny_batches(seed=4)
    weights = LossWeights.from_config(config)

    def terms():
        return compute_objective(model, batches, weights, Augmentation(batches.target_x))

    model.params.zero_grad()
    ad.backward(terms().descent_node)
    minimizing = [model.extractor.layers[0].weight, model.classifier.layers[0].weight, model.mixture.beta]
    for leaf in minimizing:
        numeric = ad.numerical_gradient(lambda: terms().total, leaf)
        np.testing.assert_allclose(leaf.grad, numeric, rtol=1e-4, atol=1e-7)

    # the discriminator descends on its own loss, i.e. ascends the total objective
    d_weight = model.discriminator.layers[0].weight
    numeric_disc = ad.numerical_gradient(lambda: terms().disc_node.item(), d_weight)
    np.testing.assert_allclose(d_weight.grad, weights.mu_d * numeric_disc, rtol=1e-4, atol=1e-7)


def test_three_source_step_ascends_discriminator_loss_and_descends_the_rest():
    config = tiny_config(mu_d=0.4, mu_s=0.2, mu_c=0.5, tau=0.0)
    model = tiny_model(config, seed=3, num_sources=3)
    batches = tiny_batches(seed=5, num_sources=3)
    weights = LossWeights.from_config(config)

    def terms():
        return compute_objective(model, batches, weights, Augmentation(batches.target_x))

    d_weight = model.discriminator.layers[0].weight
    descending = [model.extractor.layers[0].weight, model.classifier.layers[0].weight, model.mixture.beta]
    before = {leaf.name: leaf.value.copy() for leaf in descending + [d_weight]}
    expected = {leaf.name: ad.numerical_gradient(lambda: terms().total, leaf) for leaf in descending}
    disc_grad = ad.numerical_gradient(lambda: terms().disc_node.item(), d_weight)

    train_step(model, OptimizerState("sgd", 0.1), batches, config, np.random.default_rng(0))

    for leaf in descending:
        np.testing.assert_allclose((before[leaf.name] - leaf.value) / 0.1, expected[leaf.name], rtol=1e-4, atol=1e-7)
    # the discriminator lowers its own loss, which raises the total objective
    np.testing.assert_allclose((before[d_weight.name] - d_weight.value) / 0.1, weights.mu_d * disc_grad,
                               rtol=1e-4, atol=1e-7)


def test_total_matches_signed_sum_of_terms():
    config = tiny_config()
    model = tiny_model(config)
    breakdown = compute_objective(model, tiny_batches(), LossWeights.from_config(config),
                                  Augmentation(tiny_batches().target_x)).breakdown()
    expected = (breakdown.class_loss + 0.5 * breakdown.cons_loss - 0.3 * breakdown.disc_loss
                + breakdown.sparsity_term)
    assert abs(breakdown.total - expected) < 1e-12


def test_mode_weights():
    assert LossWeights.from_config(tiny_config("moda")).mu_c == 0.0
    fm = LossWeights.from_config(tiny_config("fm"))
    assert fm.mu_d == 0.0 and fm.mu_c == 0.5
    source_only = LossWeights.from_config(tiny_config("source_only"))
    assert source_only.mu_d == 0.0 and source_only.mu_c == 0.0
    assert LossWeights.from_config(tiny_config("fully_supervised_oracle")).oracle_target


# --- train step ---------------------------------------------------------------

def test_train_step_is_deterministic():
    config = tiny_config(tau=0.5)
    config.augment = AugmentSpec(kind="dropout_rate")
    results = []
    for _ in range(2):
        model = tiny_model(config)
        optimizer = OptimizerState("adadelta")
        breakdown = train_step(model, optimizer, tiny_batches(), config, np.random.default_rng(9))
        results.append((breakdown, model.params.snapshot()))
    assert results[0][0] == results[1][0]
    for name, value in results[0][1].items():
        np.testing.assert_array_equal(value, results[1][1][name])


def test_zero_weights_reduce_to_supervised_mixture_training():
    config = tiny_config(mu_d=0.0, mu_s=0.0, mu_c=0.0)
    batches = tiny_batches(seed=6)

    model = tiny_model(config)
    train_step(model, OptimizerState("sgd", 0.1), batches, config, np.random.default_rng(0))

    reference = tiny_model(config)
    ad.backward(class_loss(reference, batches))
    optimizer_step(OptimizerState("sgd", 0.1), reference.trainable())

    for name, value in reference.params.snapshot().items():
        np.testing.assert_allclose(model.params[name].value, value, atol=1e-12, rtol=0)


def test_non_finite_loss_rolls_back_the_step():
    config = tiny_config()
    model = tiny_model(config)
    poisoned = np.full(model.classifier.layers[0].weight.shape, np.nan)
    model.classifier.layers[0].weight.assign(poisoned)
    before = model.params.snapshot()
    optimizer = OptimizerState("adadelta")
    with pytest.raises(NonFiniteError) as excinfo:
        train_step(model, optimizer, tiny_batches(), config, np.random.default_rng(0))
    assert excinfo.value.name == "class_loss"
    for name, value in before.items():
        np.testing.assert_array_equal(model.params[name].value, value)
    assert optimizer.square_avg == {}


# --- trainer ------------------------------------------------------------------

def tiny_trainer(mode="moda_fm", **loss):
    config = tiny_config(mode, **loss)
    sources, target, test = split_domains(generate_domains(config.data.shift, seed=0))
    return ModaTrainer(config, sources, target, test, run_id="test")


def test_alpha_stays_on_simplex_during_training():
    trainer = tiny_trainer()
    for _ in range(8):
        trainer.step()
        alpha = trainer.model.mixture.alpha
        assert abs(alpha.sum() - 1.0) < 1e-10
        assert np.all(alpha > 0)


def test_trainer_rows_and_trajectory():
    trainer = tiny_trainer()
    record = trainer.train()
    assert [row.epoch for row in record.rows] == [1, 2]
    for row in record.rows:
        assert 0.0 <= row.acc_target <= 1.0
        assert all(0.0 <= a <= 1.0 for a in row.acc_src)
    trajectory = alpha_trajectory(record)
    assert trajectory.shape == (3, 2)
    np.testing.assert_allclose(trajectory.sum(axis=1), 1.0, atol=1e-10)


def test_trajectory_needs_an_epoch():
    with pytest.raises(ValueError):
        alpha_trajectory(RunRecord(run_id="x", seed=0, mode="moda_fm"))


def test_fixed_alpha_modes_keep_uniform_alpha():
    trainer = tiny_trainer("fm")
    record = trainer.train()
    np.testing.assert_allclose(record.rows[-1].alpha, [0.5, 0.5])


def test_oracle_mode_trains_on_target_labels():
    trainer = tiny_trainer("fully_supervised_oracle")
    assert trainer.oracle_labels is not None
    record = trainer.train()
    assert record.status == "completed"
