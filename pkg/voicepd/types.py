"""Basic types."""

from enum import Enum, IntEnum
from pathlib import Path
from typing import Optional, Union

SomePath = Union[str, Path]
MaybeInt = Optional[int]


class Label(IntEnum):
    """
    Binary class label.

    Integer value doubles as the index into the classifier logits, so
    ``logits[Label.PD]`` is the PD-positive logit.
    """

    HP = 0
    PD = 1

    @staticmethod
    def parse(value: Union[str, int, "Label"]) -> "Label":
        """Parse ``"PD"|"HP"`` (case insensitive), ``0|1`` or a :py:class:`Label`."""
        if isinstance(value, Label):
            return value
        if isinstance(value, str):
            try:
                return Label[value.strip().upper()]
            except KeyError:
                raise ValueError(f"Unknown group: {value!r}, expect PD or HP") from None
        return Label(int(value))


class UtteranceType(str, Enum):
    """Utterance categories of the phonetic test."""

    VOWEL = "vowel"
    SUSTAINED_VOWEL = "sustained_vowel"
    WORD = "word"
    SENTENCE = "sentence"

    @staticmethod
    def parse(value: Union[str, "UtteranceType"]) -> "UtteranceType":
        if isinstance(value, UtteranceType):
            return value
        try:
            return UtteranceType(value.strip().lower())
        except ValueError:
            valid = ", ".join(u.value for u in UtteranceType)
            raise ValueError(
                f"Unknown utterance type: {value!r}, expect one of {valid}"
            ) from None


class TrainingMode(str, Enum):
    """
    The three training configurations.

    * ``frozen_conv``: pretrained conv stack, frozen
    * ``full_pretrained``: pretrained conv stack, fine-tuned with the rest
    * ``full_scratch``: randomly initialised, everything trained
    """

    FROZEN_CONV = "frozen_conv"
    FULL_PRETRAINED = "full_pretrained"
    FULL_SCRATCH = "full_scratch"

    @property
    def conv_trainable(self) -> bool:
        return self is not TrainingMode.FROZEN_CONV

    @property
    def wants_pretrained(self) -> bool:
        return self is not TrainingMode.FULL_SCRATCH

    @staticmethod
    def parse(value: Union[str, "TrainingMode"]) -> "TrainingMode":
        if isinstance(value, TrainingMode):
            return value
        _aliases = {
            "frozen": TrainingMode.FROZEN_CONV,
            "full-pretrained": TrainingMode.FULL_PRETRAINED,
            "full-scratch": TrainingMode.FULL_SCRATCH,
        }
        txt = value.strip().lower()
        if txt in _aliases:
            return _aliases[txt]
        try:
            return TrainingMode(txt.replace("-", "_"))
        except ValueError:
            raise ValueError(f"Unknown training configuration: {value!r}") from None
