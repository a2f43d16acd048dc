import numpy as np
import pytest

from voicepd.types import Label, TrainingMode, UtteranceType


def test_label():
    assert Label.parse("pd") is Label.PD
    assert Label.parse(" HP ") is Label.HP
    assert Label.parse(1) is Label.PD
    assert Label.parse(Label.HP) is Label.HP
    logits = np.array([0.1, 0.9])
    assert logits[Label.PD] == 0.9

    with pytest.raises(ValueError):
        Label.parse("healthy")
    with pytest.raises(ValueError):
        Label.parse(3)


@pytest.mark.parametrize(
    "txt, expect",
    [
        ("vowel", UtteranceType.VOWEL),
        ("Sustained_Vowel", UtteranceType.SUSTAINED_VOWEL),
        (" word", UtteranceType.WORD),
        ("sentence", UtteranceType.SENTENCE),
    ],
)
def test_utterance_type(txt, expect):
    assert UtteranceType.parse(txt) is expect


def test_utterance_type_error():
    with pytest.raises(ValueError, match="sustained_vowel"):
        UtteranceType.parse("syllable")


@pytest.mark.parametrize(
    "txt, expect",
    [
        ("frozen", TrainingMode.FROZEN_CONV),
        ("frozen_conv", TrainingMode.FROZEN_CONV),
        ("full-pretrained", TrainingMode.FULL_PRETRAINED),
        ("FULL_SCRATCH", TrainingMode.FULL_SCRATCH),
        ("full-scratch", TrainingMode.FULL_SCRATCH),
    ],
)
def test_training_mode(txt, expect):
    assert TrainingMode.parse(txt) is expect


def test_training_mode_flags():
    assert not TrainingMode.FROZEN_CONV.conv_trainable
    assert TrainingMode.FULL_PRETRAINED.conv_trainable
    assert TrainingMode.FULL_SCRATCH.conv_trainable
    assert TrainingMode.FROZEN_CONV.wants_pretrained
    assert not TrainingMode.FULL_SCRATCH.wants_pretrained
    with pytest.raises(ValueError):
        TrainingMode.parse("semi")
