"""Exception types shared across the engine."""

from __future__ import annotations


class ConceptEvoError(Exception):
    """Base class for all engine errors."""


class ServiceError(ConceptEvoError):
    """A remote service (chat or embeddings) failed after the retry budget."""


class ParseError(ConceptEvoError):
    """Model output could not be parsed after the retry budget."""


class EmptyClass(ConceptEvoError):
    """Concept initialization produced zero valid concepts for a class."""


class CacheCorrupt(ConceptEvoError):
    """Score cache failed a checksum or header consistency check."""


class ShapeError(ConceptEvoError):
    """A backend or matrix operand has the wrong dimensions."""


class IncompatibleVersions(ConceptEvoError):
    """An old score matrix is not a column-prefix of the new library."""


class NoLabels(ConceptEvoError):
    """A labeled operation was invoked without labels."""


class LabelAccessError(ConceptEvoError):
    """The evolution path touched labels during a zero-shot run."""


class DivergedLoss(ConceptEvoError):
    """Adapter training produced a non-finite loss (learning rate too high)."""


class DegenerateColumn(ConceptEvoError):
    """A logit column has zero variance; correlation is undefined."""

    def __init__(self, class_index: int):
        super().__init__(f"logit column {class_index} has zero variance")
        self.class_index = class_index


class NoEligiblePairs(ConceptEvoError):
    """Every pair has zero sampling weight; the loop has converged or decayed out."""


class UnknownRound(ConceptEvoError):
    """A confusion follow-up was recorded for a round that was never opened."""


class InfeasibleWorld(ConceptEvoError):
    """Synthetic world parameters cannot satisfy the separability guarantee."""


class ConfigError(ConceptEvoError):
    """Invalid run configuration."""
