"""The three per-class feature caches and their admission semantics.

Entropy cache: bounded store of the lowest-entropy features seen per class.
Align cache:   bounded store admitting features that are both low-entropy and
               closer to the class prototype center than the current worst slot.
Negative cache: bounded store of medium-uncertainty features, populated only
               after the reflecting mechanism recalibrates a sample.

A CacheBank is single-writer: updates happen in stream order on one thread.
"""

from __future__ import annotations

import enum
import math
from dataclasses import dataclass

import numpy as np

from .core import Array, HyperParams, affinity, entropy_rows, softmax_rows
from .errors import InvalidArgumentError

ENTROPY = "entropy"
ALIGN = "align"
NEGATIVE = "negative"
RELIABLE = "reliable"  # entropy and align slots pooled, the retrieval source

CACHE_KINDS = (ENTROPY, ALIGN, NEGATIVE)


class Admission(enum.Enum):
    ADMITTED = "admitted"
    REPLACED = "replaced"
    REJECTED = "rejected"


class Routing(enum.Enum):
    STORED_NEGATIVE = "stored-negative"
    RECONSIDER_ENTROPY = "reconsider-for-entropy-cache"
    DISCARDED = "discarded"


@dataclass
class AdmissionDecision:
    status: Admission
    victim_seq: int | None = None

    @property
    def accepted(self) -> bool:
        return self.status is not Admission.REJECTED


@dataclass
class RoutingDecision:
    routing: Routing
    admission: AdmissionDecision | None = None


@dataclass
class CacheSlot:
    """One stored feature with the statistics recorded at admission time."""

    feature: Array               # unit vector, float64
    entropy: float               # nats, in [0, ln C]
    pseudo_label: int
    probs: Array                 # class probabilities at admission
    seq: int                     # monotone admission counter
    dist_to_center: float | None = None  # Euclidean, align cache only


class ClassCache:
    """Fixed-capacity slot list for a single (class, cache-kind) pair."""

    def __init__(self, capacity: int):
        if capacity < 1:
            raise InvalidArgumentError("cache capacity must be >= 1")
        self.capacity = capacity
        self.slots: list[CacheSlot] = []

    def __len__(self) -> int:
        return len(self.slots)

    @property
    def full(self) -> bool:
        return len(self.slots) >= self.capacity

    def max_entropy_slot(self) -> int:
        # among ties, prefer evicting the newest admission (keep older slots)
        best = 0
        for i, s in enumerate(self.slots[1:], start=1):
            b = self.slots[best]
            if s.entropy > b.entropy or (s.entropy == b.entropy and s.seq > b.seq):
                best = i
        return best


@dataclass
class BankCounters:
    admissions: int = 0
    replacements: int = 0
    rejections: int = 0
    discards: int = 0
    reconsiders: int = 0


class CacheBank:
    """Per-class entropy/align/negative caches plus enable flags and counters."""

    def __init__(
        self,
        num_classes: int,
        dim: int,
        hp: HyperParams,
        enabled: dict[str, bool] | None = None,
    ):
        if num_classes < 1 or dim < 1:
            raise InvalidArgumentError("need num_classes >= 1 and dim >= 1")
        self.num_classes = num_classes
        self.dim = dim
        self.enabled = {k: True for k in CACHE_KINDS}
        if enabled:
            for k, v in enabled.items():
                if k not in CACHE_KINDS:
                    raise InvalidArgumentError(f"unknown cache kind {k!r}")
                self.enabled[k] = bool(v)
        caps = {ENTROPY: hp.m_entropy, ALIGN: hp.m_align, NEGATIVE: hp.m_negative}
        self.caches: dict[str, list[ClassCache]] = {
            kind: [ClassCache(caps[kind]) for _ in range(num_classes)]
            for kind in CACHE_KINDS
        }
        self.next_seq = 0
        self.counters = {kind: BankCounters() for kind in CACHE_KINDS}

    # -- bookkeeping -----------------------------------------------------

    def _take_seq(self) -> int:
        s = self.next_seq
        self.next_seq += 1
        return s

    def _check_feature(self, feature: Array) -> Array:
        feature = np.asarray(feature, dtype=np.float64)
        if feature.shape != (self.dim,):
            raise InvalidArgumentError(
                f"feature has shape {feature.shape}, bank dimension is {self.dim}"
            )
        return feature

    def occupancy(self) -> dict[str, int]:
        return {
            kind: sum(len(c) for c in self.caches[kind]) for kind in CACHE_KINDS
        }

    # -- admission policies ----------------------------------------------

    def entropy_update(self, feature: Array, probs: Array) -> AdmissionDecision:
        """Admit into the entropy cache of the argmax class.

        Not full: admit. Full: replace the worst (highest-entropy) slot only
        if the new sample's entropy is strictly lower; otherwise reject.
        """
        feature = self._check_feature(feature)
        probs = np.asarray(probs, dtype=np.float64)
        label = int(np.argmax(probs))
        h = float(entropy_rows(probs[None, :])[0])
        cache = self.caches[ENTROPY][label]
        counters = self.counters[ENTROPY]
        slot = CacheSlot(feature, h, label, probs.copy(), self._take_seq())
        if not cache.full:
            cache.slots.append(slot)
            counters.admissions += 1
            return AdmissionDecision(Admission.ADMITTED)
        worst = cache.max_entropy_slot()
        if h < cache.slots[worst].entropy:
            victim = cache.slots[worst].seq
            cache.slots[worst] = slot
            counters.replacements += 1
            return AdmissionDecision(Admission.REPLACED, victim_seq=victim)
        counters.rejections += 1
        return AdmissionDecision(Admission.REJECTED)

    def align_update(
        self, feature: Array, probs: Array, center: Array
    ) -> AdmissionDecision:
        """Admit into the align cache, recording distance to the class center.

        Not full: admit unconditionally. Full: replace the highest-entropy
        slot only if the new sample has strictly lower entropy AND is strictly
        closer to the center than that slot's recorded distance.
        """
        feature = self._check_feature(feature)
        center = self._check_feature(center)
        probs = np.asarray(probs, dtype=np.float64)
        label = int(np.argmax(probs))
        h = float(entropy_rows(probs[None, :])[0])
        d = float(np.linalg.norm(feature - center))
        cache = self.caches[ALIGN][label]
        counters = self.counters[ALIGN]
        slot = CacheSlot(feature, h, label, probs.copy(), self._take_seq(), d)
        if not cache.full:
            cache.slots.append(slot)
            counters.admissions += 1
            return AdmissionDecision(Admission.ADMITTED)
        worst = cache.max_entropy_slot()
        victim = cache.slots[worst]
        if h < victim.entropy and d < victim.dist_to_center:
            cache.slots[worst] = slot
            counters.replacements += 1
            return AdmissionDecision(Admission.REPLACED, victim_seq=victim.seq)
        counters.rejections += 1
        return AdmissionDecision(Admission.REJECTED)

    def negative_update(
        self, feature: Array, calibrated_probs: Array, h_prime: float, hp: HyperParams
    ) -> RoutingDecision:
        """Route a recalibrated sample by its calibrated entropy.

        Inside [h_low, h_high] (closed band, fractions of ln C): store in the
        negative cache of the calibrated argmax class, evicting the
        highest-entropy slot when full and strictly above the newcomer.
        Below the band: hand back for entropy-cache reconsideration.
        Above: discard.
        """
        feature = self._check_feature(feature)
        calibrated_probs = np.asarray(calibrated_probs, dtype=np.float64)
        ln_c = math.log(self.num_classes)
        h_low = hp.h_low_frac * ln_c
        h_high = hp.h_high_frac * ln_c
        counters = self.counters[NEGATIVE]
        if h_prime < h_low:
            counters.reconsiders += 1
            return RoutingDecision(Routing.RECONSIDER_ENTROPY)
        if h_prime > h_high:
            counters.discards += 1
            return RoutingDecision(Routing.DISCARDED)
        label = int(np.argmax(calibrated_probs))
        cache = self.caches[NEGATIVE][label]
        slot = CacheSlot(
            feature, float(h_prime), label, calibrated_probs.copy(), self._take_seq()
        )
        if not cache.full:
            cache.slots.append(slot)
            counters.admissions += 1
            return RoutingDecision(
                Routing.STORED_NEGATIVE, AdmissionDecision(Admission.ADMITTED)
            )
        worst = cache.max_entropy_slot()
        if h_prime < cache.slots[worst].entropy:
            victim = cache.slots[worst].seq
            cache.slots[worst] = slot
            counters.replacements += 1
            return RoutingDecision(
                Routing.STORED_NEGATIVE,
                AdmissionDecision(Admission.REPLACED, victim_seq=victim),
            )
        counters.rejections += 1
        return RoutingDecision(
            Routing.STORED_NEGATIVE, AdmissionDecision(Admission.REJECTED)
        )

    # -- matrix views ------------------------------------------------------

    def _sorted_slots(self, kinds: tuple[str, ...]) -> list[CacheSlot]:
        slots = []
        for c in range(self.num_classes):
            per_class = []
            for kind in kinds:
                if self.enabled[kind]:
                    per_class.extend(self.caches[kind][c].slots)
            per_class.sort(key=lambda s: s.seq)
            slots.extend(per_class)
        return slots


@dataclass
class CacheMatrices:
    """Dense row views of cache contents, row order fixed by (class, seq)."""

    features: Array    # K x d unit rows
    labels: Array      # K x C one-hot
    seqs: Array        # K admission counters
    neg_mask: Array | None = None  # K x C, negative kind only

    @property
    def empty(self) -> bool:
        return self.features.shape[0] == 0


def cache_matrices(bank: CacheBank, kind: str, p_mask: float = 0.03) -> CacheMatrices:
    """Materialize one cache kind (or the pooled RELIABLE view) as matrices.

    For the negative kind the class mask flags every class whose stored
    calibrated probability strictly exceeds p_mask.
    """
    if kind == RELIABLE:
        slots = bank._sorted_slots((ENTROPY, ALIGN))
    elif kind in CACHE_KINDS:
        slots = bank._sorted_slots((kind,)) if bank.enabled[kind] else []
    else:
        raise InvalidArgumentError(f"unknown cache kind {kind!r}")
    k = len(slots)
    c = bank.num_classes
    if k == 0:
        empty = np.zeros((0, bank.dim))
        zeros = np.zeros((0, c))
        mask = zeros.copy() if kind == NEGATIVE else None
        return CacheMatrices(empty, zeros, np.zeros(0, dtype=np.int64), mask)
    features = np.stack([s.feature for s in slots])
    labels = np.zeros((k, c))
    labels[np.arange(k), [s.pseudo_label for s in slots]] = 1.0
    seqs = np.array([s.seq for s in slots], dtype=np.int64)
    neg_mask = None
    if kind == NEGATIVE:
        probs = np.stack([s.probs for s in slots])
        neg_mask = (probs > p_mask).astype(np.float64)
    return CacheMatrices(features, labels, seqs, neg_mask)


def retrieval_logits(feature: Array, bank: CacheBank, hp: HyperParams) -> Array:
    """Affinity-weighted vote of the reliable (entropy + align) slots.

    Returns a length-C logit contribution; classes without slots get 0.
    """
    mats = cache_matrices(bank, RELIABLE)
    if mats.empty:
        return np.zeros(bank.num_classes)
    sims = mats.features @ np.asarray(feature, dtype=np.float64)
    return affinity(sims, hp.alpha, hp.beta) @ mats.labels


def reflect(
    feature: Array, bank: CacheBank, text_protos: Array, hp: HyperParams
) -> tuple[Array, float]:
    """Recalibrate a high-entropy sample against the reliable caches.

    Calibrated logits are the temperature-scaled text logits plus the
    retrieval vote; with empty caches this reproduces the zero-shot
    probabilities exactly. Returns (calibrated_probs, calibrated_entropy).
    """
    feature = np.asarray(feature, dtype=np.float64)
    zs_logits = (text_protos @ feature) / hp.tau
    calibrated = zs_logits + retrieval_logits(feature, bank, hp)
    probs = softmax_rows(calibrated[None, :])[0]
    h_prime = float(entropy_rows(probs[None, :])[0])
    return probs, h_prime
