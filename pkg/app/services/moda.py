# app/services/moda.py
"""
Objective terms and training loop for adaptation from a learned mixture of sources.

The total objective is

    class_loss + mu_c * cons_loss - mu_d * disc_loss + mu_s * ||alpha||^2

minimised over the extractor, classifier and mixture logits and maximised over
the discriminator. Gradient reversal on the discriminator input and on the
alpha path feeding the discriminator loss turns this into a single descent
step on all parameters.
"""
import logging
import uuid
from typing import Callable, List, Optional, Sequence

import numpy as np

from app.errors import DataError, NonFiniteError
from app.models import EpochRow, LossBreakdown, ModelSection, RunRecord, TrainConfig
from app.services import autodiff as ad
from app.services.augment import Augmentation, augment_batch, site_rates
from app.services.autodiff import Node
from app.services.data_service import BatchBundle, BatchSampler, DomainDataset
from app.services.nn import Mlp, OptimizerState, ParameterStore, build_mlp, mlp_forward, optimizer_step

logger = logging.getLogger(__name__)

# stream tags for np.random.default_rng([seed, tag, ...])
MODEL_STREAM = 0
STEP_STREAM = 1

FIXED_ALPHA_MODES = ("fm", "uniform_alpha_adversarial", "source_only", "fully_supervised_oracle")


class MixtureWeights:
    """Source weights alpha = softmax(beta); alpha is derived from beta on every access."""

    def __init__(self, num_sources: int, rng: np.random.Generator, learnable: bool = True):
        if num_sources < 1:
            raise ValueError("need at least one source domain")
        initial = rng.uniform(0.0, 1.0, size=num_sources)
        self.learnable = learnable
        self.beta = Node(initial if learnable else np.zeros(num_sources), requires_grad=learnable,
                         name="mixture.beta")

    @property
    def num_sources(self) -> int:
        return self.beta.shape[0]

    def alpha_node(self) -> Node:
        return ad.softmax(self.beta)

    @property
    def alpha(self) -> np.ndarray:
        shifted = self.beta.value - self.beta.value.max()
        weights = np.exp(shifted)
        return weights / weights.sum()


class ModaModel:
    """Feature extractor g, classifier h, domain discriminator d and mixture weights."""

    def __init__(self, input_dim: int, num_classes: int, num_sources: int, spec: ModelSection,
                 rng: np.random.Generator, learn_alpha: bool = True):
        feature_dim = spec.extractor_hidden[-1]
        self.extractor: Mlp = build_mlp([input_dim] + list(spec.extractor_hidden), rng, "extractor",
                                        final_activation="relu")
        self.classifier: Mlp = build_mlp([feature_dim] + list(spec.classifier_hidden) + [num_classes], rng,
                                         "classifier")
        self.discriminator: Mlp = build_mlp([feature_dim] + list(spec.discriminator_hidden) + [2], rng,
                                            "discriminator")
        self.mixture = MixtureWeights(num_sources, rng, learnable=learn_alpha)
        self.num_classes = num_classes
        self.params = ParameterStore()
        self.params.register(self.extractor.parameters())
        self.params.register(self.classifier.parameters())
        self.params.register(self.discriminator.parameters())
        self.params.register([self.mixture.beta])

    def trainable(self) -> List[Node]:
        return [p for p in self.params if p.requires_grad]

    def predict(self, x: np.ndarray) -> np.ndarray:
        logits = mlp_forward(self.classifier, mlp_forward(self.extractor, x))
        return np.argmax(logits.value, axis=1)

    def accuracy(self, dataset: DomainDataset) -> float:
        return float(np.mean(self.predict(dataset.features) == dataset.oracle_labels()))


class LossWeights:
    """Effective objective weights after the training mode has been applied."""

    def __init__(self, mu_d: float, mu_s: float, mu_c: float, tau: float,
                 feature_reversal: float = 1.0, alpha_reversal: float = 1.0, oracle_target: bool = False):
        self.mu_d = mu_d
        self.mu_s = mu_s
        self.mu_c = mu_c
        self.tau = tau
        self.feature_reversal = feature_reversal
        self.alpha_reversal = alpha_reversal
        self.oracle_target = oracle_target

    @classmethod
    def from_config(cls, config: TrainConfig) -> "LossWeights":
        mode = config.run.mode
        loss = config.loss
        mu_d = 0.0 if mode in ("fm", "source_only", "fully_supervised_oracle") else loss.mu_d
        mu_c = 0.0 if mode in ("moda", "uniform_alpha_adversarial", "source_only",
                               "fully_supervised_oracle") else loss.mu_c
        return cls(mu_d, loss.mu_s, mu_c, loss.tau, config.model.feature_reversal, config.model.alpha_reversal,
                   oracle_target=mode == "fully_supervised_oracle")


class EncodedBatch:
    """Deterministic features of all source rows and the target rows from one extractor pass."""

    def __init__(self, model: ModaModel, batches: BatchBundle):
        blocks = list(batches.source_x) + [batches.target_x]
        features = mlp_forward(model.extractor, np.concatenate(blocks, axis=0))
        m = batches.m
        source_rows = m * batches.num_sources
        self.m = m
        self.source = ad.select_rows(features, np.arange(source_rows))
        self.target = ad.select_rows(features, np.arange(source_rows, source_rows + m))
        # mixture component of every stacked source row
        self.domain_of_row = np.repeat(np.arange(batches.num_sources), m)


def _row_weights(alpha: Node, encoded: EncodedBatch) -> Node:
    return ad.select_rows(alpha, encoded.domain_of_row)


def class_loss(model: ModaModel, batches: BatchBundle, encoded: Optional[EncodedBatch] = None) -> Node:
    """-(1/m) * sum_j alpha_j * sum_{(x,y) in S_j} log p(y|x)."""
    encoded = encoded or EncodedBatch(model, batches)
    labels = np.concatenate(batches.source_y)
    if labels.size and (labels.min() < 0 or labels.max() >= model.num_classes):
        raise DataError(f"source label outside [0, {model.num_classes})")
    nll = ad.cross_entropy_terms(mlp_forward(model.classifier, encoded.source), labels)
    weighted = ad.multiply(nll, _row_weights(model.mixture.alpha_node(), encoded))
    return ad.scale(ad.sum(weighted), 1.0 / encoded.m)


def per_domain_class_losses(model: ModaModel, batches: BatchBundle, encoded: EncodedBatch) -> List[float]:
    labels = np.concatenate(batches.source_y)
    nll = ad.cross_entropy_terms(mlp_forward(model.classifier, ad.detach(encoded.source)), labels).value
    return [float(nll[encoded.domain_of_row == j].mean()) for j in range(batches.num_sources)]


def target_class_loss(model: ModaModel, batches: BatchBundle, target_labels: np.ndarray,
                      encoded: Optional[EncodedBatch] = None) -> Node:
    """Plain cross-entropy on target rows with oracle labels (fully supervised reference)."""
    encoded = encoded or EncodedBatch(model, batches)
    nll = ad.cross_entropy_terms(mlp_forward(model.classifier, encoded.target), target_labels)
    return ad.mean(nll)


def disc_loss(model: ModaModel, batches: BatchBundle, encoded: Optional[EncodedBatch] = None,
              feature_reversal: float = 1.0, alpha_reversal: float = 1.0) -> Node:
    """
    -(1/m) sum_j alpha_j sum log p(d=0|x) - (1/m) sum_{x in T} log p(d=1|x).

    Reversal layers sit on the features entering the discriminator and on the
    alpha feeding this loss; the returned value is unaffected by them.
    """
    encoded = encoded or EncodedBatch(model, batches)
    source_logits = mlp_forward(model.discriminator, ad.gradient_reversal(encoded.source, feature_reversal))
    target_logits = mlp_forward(model.discriminator, ad.gradient_reversal(encoded.target, feature_reversal))
    source_nll = ad.cross_entropy_terms(source_logits, np.zeros(source_logits.shape[0], dtype=np.int64))
    target_nll = ad.cross_entropy_terms(target_logits, np.ones(target_logits.shape[0], dtype=np.int64))
    alpha = ad.gradient_reversal(model.mixture.alpha_node(), alpha_reversal)
    source_term = ad.sum(ad.multiply(source_nll, _row_weights(alpha, encoded)))
    return ad.scale(ad.add(source_term, ad.sum(target_nll)), 1.0 / encoded.m)


def consistency_terms(clean_logits: np.ndarray, augmented_logits: Node, tau: float):
    """
    Thresholded pseudo-label loss from precomputed clean logits.

    Returns (loss node, masked fraction, pseudo-labels). The loss sums over
    confident rows and divides by the full batch size.
    """
    clean = np.asarray(clean_logits, dtype=np.float64)
    shifted = np.exp(clean - clean.max(axis=1, keepdims=True))
    probs = shifted / shifted.sum(axis=1, keepdims=True)
    pseudo = np.argmax(probs, axis=1)
    mask = probs.max(axis=1) > tau
    m = clean.shape[0]
    if not mask.any():
        return ad.constant(0.0), 0.0, pseudo
    nll = ad.cross_entropy_terms(augmented_logits, pseudo)
    loss = ad.scale(ad.sum(ad.multiply(nll, ad.constant(mask.astype(np.float64)))), 1.0 / m)
    return loss, float(mask.mean()), pseudo


def consistency_loss(model: ModaModel, target_x: np.ndarray, augmentation: Augmentation, tau: float,
                     rng: Optional[np.random.Generator] = None, dropout_sites: Optional[Sequence[int]] = None,
                     encoded_target: Optional[Node] = None):
    """Pseudo-labels from a deterministic pass; loss on the transformed pass. Returns (loss, masked fraction)."""
    if tau < 0:
        raise ValueError("tau must be non-negative")
    clean_features = encoded_target if encoded_target is not None else mlp_forward(model.extractor, target_x)
    clean_logits = mlp_forward(model.classifier, ad.detach(clean_features)).value
    if augmentation.uses_dropout:
        rates = site_rates(model.extractor, augmentation.dropout_rate, dropout_sites)
        features = mlp_forward(model.extractor, target_x, rng=rng, dropout_rates=rates)
    else:
        features = mlp_forward(model.extractor, augmentation.x)
    loss, masked, _ = consistency_terms(clean_logits, mlp_forward(model.classifier, features), tau)
    return loss, masked


def sparsity_term(mixture: MixtureWeights, mu_s: float) -> Node:
    if mu_s < 0:
        raise ValueError("mu_s must be non-negative")
    alpha = mixture.alpha_node()
    return ad.scale(ad.sum(ad.multiply(alpha, alpha)), mu_s)


class ObjectiveTerms:
    """All loss terms of one step plus the node that gradient descent is run on."""

    def __init__(self, class_node: Node, disc_node: Node, cons_node: Node, sparsity_node: Node,
                 weights: LossWeights, per_domain: List[float], masked_fraction: float):
        self.class_node = class_node
        self.disc_node = disc_node
        self.cons_node = cons_node
        self.sparsity_node = sparsity_node
        self.weights = weights
        self.per_domain = per_domain
        self.masked_fraction = masked_fraction
        # reversal layers inside disc_node supply the minus sign for the minimising players
        self.descent_node = ad.add(
            ad.add(class_node, ad.scale(cons_node, weights.mu_c)),
            ad.add(ad.scale(disc_node, weights.mu_d), sparsity_node),
        )

    @property
    def total(self) -> float:
        w = self.weights
        return (self.class_node.item() + w.mu_c * self.cons_node.item() - w.mu_d * self.disc_node.item()
                + self.sparsity_node.item())

    def check_finite(self) -> None:
        for name, node in (("class_loss", self.class_node), ("disc_loss", self.disc_node),
                           ("cons_loss", self.cons_node), ("sparsity_term", self.sparsity_node)):
            if not np.isfinite(node.item()):
                raise NonFiniteError(name, f"non-finite {name}; step aborted")

    def breakdown(self) -> LossBreakdown:
        return LossBreakdown(
            class_loss=self.class_node.item(),
            disc_loss=self.disc_node.item(),
            cons_loss=self.cons_node.item(),
            sparsity_term=self.sparsity_node.item(),
            total=self.total,
            per_domain_class_losses=self.per_domain,
            masked_fraction=self.masked_fraction,
        )


def compute_objective(model: ModaModel, batches: BatchBundle, weights: LossWeights, augmentation: Augmentation,
                      rng: Optional[np.random.Generator] = None, dropout_sites: Optional[Sequence[int]] = None,
                      target_labels: Optional[np.ndarray] = None) -> ObjectiveTerms:
    encoded = EncodedBatch(model, batches)
    if weights.oracle_target:
        if target_labels is None:
            raise DataError("fully supervised reference needs oracle target labels")
        class_node = target_class_loss(model, batches, target_labels, encoded)
    else:
        class_node = class_loss(model, batches, encoded)
    disc_node = disc_loss(model, batches, encoded, weights.feature_reversal, weights.alpha_reversal)
    cons_node, masked = consistency_loss(model, batches.target_x, augmentation, weights.tau, rng, dropout_sites,
                                         encoded_target=encoded.target)
    sparsity_node = sparsity_term(model.mixture, weights.mu_s)
    per_domain = per_domain_class_losses(model, batches, encoded)
    return ObjectiveTerms(class_node, disc_node, cons_node, sparsity_node, weights, per_domain, masked)


def train_step(model: ModaModel, optimizer: OptimizerState, batches: BatchBundle, config: TrainConfig,
               rng: np.random.Generator, target_labels: Optional[np.ndarray] = None) -> LossBreakdown:
    """
    One simultaneous update of all parameters. Returns the loss breakdown
    evaluated before the update; on a non-finite loss or gradient the
    parameters and optimizer state are rolled back and the error re-raised.
    """
    weights = LossWeights.from_config(config)
    augmentation = augment_batch(batches.target_x, config.augment, rng)
    params_before = model.params.snapshot()
    optim_before = optimizer.snapshot()
    try:
        terms = compute_objective(model, batches, weights, augmentation, rng, config.augment.dropout_sites,
                                  target_labels)
        terms.check_finite()
        ad.backward(terms.descent_node)
        optimizer_step(optimizer, model.trainable())
    except NonFiniteError as e:
        model.params.restore(params_before)
        optimizer.restore(optim_before)
        model.params.zero_grad()
        logger.error(f"Training step aborted: {e}")
        raise
    return terms.breakdown()


def alpha_trajectory(record: RunRecord) -> np.ndarray:
    """Epoch-indexed alpha rows; row 0 is the initial mixture."""
    if not record.rows:
        raise ValueError("alpha trajectory needs at least one trained epoch")
    rows = [record.initial_alpha] if record.initial_alpha else []
    rows.extend(row.alpha for row in record.rows)
    return np.asarray(rows, dtype=np.float64)


class ModaTrainer:
    """Runs one training job: epochs of train_step followed by evaluation."""

    def __init__(self, config: TrainConfig, sources: Sequence[DomainDataset], target: DomainDataset,
                 evaluation: DomainDataset, run_id: Optional[str] = None):
        self.config = config
        self.sources = list(sources)
        self.target = target
        self.evaluation = evaluation
        self.seed = config.run.seed
        self.run_id = run_id or uuid.uuid4().hex[:8]
        self.logger = logging.getLogger(__name__)

        num_classes = max(s.num_classes or 0 for s in self.sources + [target])
        model_rng = np.random.default_rng([self.seed, MODEL_STREAM])
        self.model = ModaModel(target.dim, num_classes, len(self.sources), config.model, model_rng,
                               learn_alpha=config.run.mode not in FIXED_ALPHA_MODES)
        optim = config.optim
        self.optimizer = OptimizerState(optim.kind, optim.learning_rate, optim.rho, optim.eps)
        self.sampler = BatchSampler(self.sources, target, config.run.batch_size, self.seed)
        self.iterations_per_epoch = config.run.iterations_per_epoch or self.sampler.iterations_per_epoch
        self.oracle_labels = target.oracle_labels() if config.run.mode == "fully_supervised_oracle" else None
        self.can_evaluate = evaluation.has_oracle or evaluation.labels is not None

    def step(self) -> LossBreakdown:
        iteration = self.sampler.iteration
        batches = self.sampler.next()
        rng = np.random.default_rng([self.seed, STEP_STREAM, iteration])
        labels = None if self.oracle_labels is None else self.oracle_labels[batches.target_indices]
        breakdown = train_step(self.model, self.optimizer, batches, self.config, rng, labels)
        self.logger.debug(f"Run {self.run_id} step {iteration}: total={breakdown.total:.6f} "
                          f"masked={breakdown.masked_fraction:.3f}")
        return breakdown

    def run_epoch(self, epoch: int) -> EpochRow:
        steps = [self.step() for _ in range(self.iterations_per_epoch)]
        row = EpochRow(
            epoch=epoch,
            loss_class=float(np.mean([s.class_loss for s in steps])),
            loss_disc=float(np.mean([s.disc_loss for s in steps])),
            loss_cons=float(np.mean([s.cons_loss for s in steps])),
            sparsity=float(np.mean([s.sparsity_term for s in steps])),
            total=float(np.mean([s.total for s in steps])),
            alpha=[float(a) for a in self.model.mixture.alpha],
            masked_frac=float(np.mean([s.masked_fraction for s in steps])),
            acc_target=self.model.accuracy(self.evaluation) if self.can_evaluate else float("nan"),
            acc_src=[self.model.accuracy(s) for s in self.sources],
        )
        self.logger.info(f"Run {self.run_id} epoch {epoch}: total={row.total:.4f} "
                         f"alpha={np.round(row.alpha, 3).tolist()} acc_target={row.acc_target:.4f}")
        return row

    def train(self, on_epoch: Optional[Callable[[EpochRow], None]] = None) -> RunRecord:
        """All configured epochs; a non-finite step ends the run and marks the record failed."""
        record = RunRecord(run_id=self.run_id, seed=self.seed, mode=self.config.run.mode,
                           initial_alpha=[float(a) for a in self.model.mixture.alpha])
        self.logger.info(f"Run {self.run_id}: mode {record.mode}, seed {self.seed}, "
                         f"{self.iterations_per_epoch} iterations per epoch, {self.model.params.count()} parameters")
        try:
            for epoch in range(1, self.config.run.epochs + 1):
                row = self.run_epoch(epoch)
                record.rows.append(row)
                if on_epoch is not None:
                    on_epoch(row)
        except NonFiniteError as e:
            self.logger.error(f"Run {self.run_id} failed at epoch {len(record.rows) + 1}: {e}")
            record.status = "failed"
            record.failure_reason = f"non-finite {e.name}: {e}"
        return record
