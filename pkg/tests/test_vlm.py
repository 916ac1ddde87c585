import io
import random

import pytest

from detvlm.core import ImageRef
from detvlm.vlm import (
    ExistenceVerdict,
    RawReply,
    ScriptedVlm,
    classify_existence,
    classify_state,
    downscale_image,
)

YES, NO, AMBIGUOUS = ExistenceVerdict.YES, ExistenceVerdict.NO, ExistenceVerdict.AMBIGUOUS


@pytest.mark.parametrize(
    "reply,expected",
    [
        ("Yes", YES),
        ("I cannot tell", AMBIGUOUS),
        ("no, there is no visor.", NO),
        ("It is unclear", AMBIGUOUS),
        ("", AMBIGUOUS),
        ("  Yes!  ", YES),
        ("NO.", NO),
        ("There is a sun visor.", AMBIGUOUS),
        ("Possibly yes", AMBIGUOUS),
        ("yes - clearly visible", YES),
    ],
)
def test_classify_existence(reply, expected):
    assert classify_existence(reply) is expected
    assert classify_existence(RawReply(text=reply)) is expected


def test_classify_existence_case_insensitive():
    rng = random.Random(20240501)
    samples = ["Yes", "No, never", "It Is Unclear", "MAYBE", "yes and no"]
    for text in samples:
        mixed = "".join(c.upper() if rng.random() < 0.5 else c.lower() for c in text)
        assert classify_existence(mixed) is classify_existence(text.lower())


def test_classify_existence_custom_ambiguity_phrases():
    assert classify_existence("hmm, not sure", ambiguous_phrases=("not sure",)) is AMBIGUOUS


def test_classify_state_canonical_cases():
    assert classify_state("The visor is lowered.", ["raised", "lowered"]) == "lowered"
    assert classify_state("raised", ["raised", "lowered"]) == "raised"
    assert classify_state("hard to say", ["occluded", "clear"]) is None


def test_classify_state_earliest_occurrence_wins():
    assert classify_state("clear, not occluded", ["occluded", "clear"]) == "clear"
    assert classify_state("not raised but lowered", ["raised", "lowered"]) == "raised"


def test_classify_state_tie_is_ambiguous():
    # "low" and "lower" both first occur at the same index.
    assert classify_state("it is lower", ["low", "lower"]) is None


def test_classify_state_case_insensitive_and_keeps_label_spelling():
    assert classify_state("LOWERED!", ["Raised", "Lowered"]) == "Lowered"


def test_classify_state_never_invents_labels():
    rng = random.Random(11)
    words = ["alpha", "beta", "gamma", "delta", "open", "closed", "murky"]
    for _ in range(500):
        options = rng.sample(words, rng.randint(1, 4))
        reply = " ".join(rng.choices(words + ["noise", "??"], k=rng.randint(0, 6)))
        got = classify_state(reply, options)
        assert got is None or got in options


def test_classify_state_validates_options():
    with pytest.raises(ValueError):
        classify_state("x", [])
    with pytest.raises(ValueError):
        classify_state("x", ["Up", "up"])


def test_scripted_vlm_first_match_wins_and_default():
    vlm = ScriptedVlm(
        [
            {"image_id": "img_001", "prompt_contains": "sun visor", "reply": "Yes"},
            {"image_id": "img_001", "prompt_contains": "sun", "reply": "No"},
        ]
    )
    image = ImageRef(image_id="img_001")
    assert vlm.ask(image, "Is there a sun visor in this image?").text == "Yes"
    assert vlm.ask(image, "Is there a sunroof?").text == "No"
    assert vlm.ask(image, "Is there a roof?").text == "It is unclear"
    assert vlm.ask(ImageRef(image_id="img_002"), "anything").text == "It is unclear"


def test_scripted_vlm_is_pure():
    vlm = ScriptedVlm([{"image_id": "a", "prompt_contains": "visor", "reply": "Yes"}])
    image = ImageRef(image_id="a")
    replies = {vlm.ask(image, "Is there a visor?").text for _ in range(50)}
    assert replies == {"Yes"}


def test_scripted_vlm_from_path(tmp_path):
    path = tmp_path / "vlm.jsonl"
    path.write_text('{"image_id": "a", "prompt_contains": "visor", "reply": "Yes"}\n')
    vlm = ScriptedVlm.from_path(path, default_reply="It is unclear")
    assert vlm.ask(ImageRef(image_id="a"), "Is there a visor?").text == "Yes"


def test_downscale_image_preserves_aspect():
    from PIL import Image

    buffer = io.BytesIO()
    Image.new("RGB", (4096, 2048), color=(10, 20, 30)).save(buffer, format="PNG")
    shrunk = downscale_image(buffer.getvalue(), max_side=1024)
    with Image.open(io.BytesIO(shrunk)) as result:
        assert result.size == (1024, 512)


def test_downscale_image_leaves_small_images_untouched():
    from PIL import Image

    buffer = io.BytesIO()
    Image.new("RGB", (640, 480)).save(buffer, format="PNG")
    data = buffer.getvalue()
    assert downscale_image(data, max_side=1024) == data
