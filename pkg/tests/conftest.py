import pytest

from vtldoc.corpus import render_document, synth_document
from vtldoc.geometry import BBox
from vtldoc.tasks import PROMPT_WORDS
from vtldoc.vocab import build_vocab

WORKED_WORDS = ["Ship", "Date", "to", "Retail:", "Week", "of", "March", "14,", "1994"]
WORKED_BOXES = [
    BBox(0.200, 0.700, 0.218, 0.744),  # Ship
    BBox(0.218, 0.700, 0.236, 0.744),  # Date; union with Ship = (.2,.7,.236,.744)
    BBox(0.240, 0.700, 0.270, 0.744),
    BBox(0.280, 0.700, 0.330, 0.744),
    BBox(0.340, 0.700, 0.390, 0.744),
    BBox(0.200, 0.740, 0.236, 0.764),  # of -> indices (100,370,118,382)
    BBox(0.240, 0.740, 0.290, 0.764),
    BBox(0.300, 0.740, 0.330, 0.764),
    BBox(0.340, 0.740, 0.380, 0.764),
]
# reference masked spans for the worked example: "Ship Date" and "of"
WORKED_SPANS = [(0, 2), (5, 6)]

WORKED_LABELS = {
    "class": "Memo.",
    "qa": {"question": "What is the ship year?", "answer": "1994"},
    "entity_tags": ["I-Header"] * 9,
    "nli": {
        "premise": "Ship Date to Retail:",
        "hypothesis": "Week of March 14, 1994",
        "label": "Entailment",
    },
    "regions": [{"name": "Paragraph", "bbox": [0.164, 0.07, 0.30, 0.878]}],
    "query": {"text": "Ship Date to Retail", "label": "Week of March 14, 1994"},
}


@pytest.fixture(scope="session")
def worked_doc():
    return render_document(
        "worked", list(zip(WORKED_WORDS, WORKED_BOXES)), 64, 64, labels=WORKED_LABELS
    )


@pytest.fixture(scope="session")
def vocab(worked_doc):
    words = list(PROMPT_WORDS) + WORKED_WORDS
    words += ["Paragraph", "Entailment", "Not", "[I-Header]", "Memo.", "What", "is",
              "the", "ship", "year?", "Retail", "Retail:"]
    for i in range(8):
        words += [w for w, _ in synth_document(7, i, 32, 32).words]
    return build_vocab(words, sentinel_count=16, granularity=500)
