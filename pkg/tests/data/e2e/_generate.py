"""Regenerate the end-to-end mock fixture in this directory.

Run from the repo root:  python tests/data/e2e/_generate.py

Everything is pinned: embeddings come from the encoder fixture, chat replies
from the script, timestamps from a fixed clock — so the committed bytes are
reproducible.  Outcome design (all cosines follow from the pinned vectors):

  qa -> ranks alpha,beta,gamma; selection picks alpha; verification passes
  qb -> ranks beta,alpha,gamma; selection picks beta; verification passes
  qc -> ranks gamma,alpha,beta; selection hallucinates alpha ("red glaze"),
        the attribute check prefers gamma, pairwise recovers gamma
  qx -> ranks gamma,alpha,beta; selection picks gamma; verification passes

Recognition task (6 queries): tp=3 fn=0 tn=2 fp=1 (the qx negative resolves
to its own target) -> pos 1.0, neg 2/3, wtd 5/6.  Caption: 1 of 2 captions
names the concept -> 0.5.  VQA: 1 of 2 answers match -> 0.5.
"""

from __future__ import annotations

import json
from datetime import datetime, timezone
from pathlib import Path

from percept.db import ConceptDatabase
from percept.encoders import EncoderBackendConfig, MockEncoder, mock_image_bytes
from percept.enrollment import enroll_with_privileged_attributes

HERE = Path(__file__).parent
DIM = 4

VECTORS = {
    "ref-alpha": [1, 0, 0, 0],
    "ref-beta": [0, 1, 0, 0],
    "ref-gamma": [0, 0, 1, 0],
    "a red mug with a round body": [1, 0, 0, 0],
    "a blue mug with a tall handle": [0, 1, 0, 0],
    "a green mug with a square handle": [0, 0, 1, 0],
    "qa": [3, 1, 1, 0],
    "qb": [1, 3, 1, 0],
    "qc": [1, 1, 3, 0],
    "qx": [2, 1, 3, 0],
    "red glaze": [1, 0, 0, 0],
    "blue glaze": [0, 1, 0, 0],
    "green glaze": [0, 0, 1, 0],
    "round body": [1, 1, 0, 0],
    "tall handle": [0, 1, 1, 0],
}

CONCEPTS = [
    ("c-alpha", "alpha-mug", "a red mug with a round body",
     ["red glaze", "round body"], "ref-alpha"),
    ("c-beta", "beta-mug", "a blue mug with a tall handle",
     ["blue glaze", "tall handle"], "ref-beta"),
    ("c-gamma", "gamma-mug", "a green mug with a square handle",
     ["green glaze", "square handle"], "ref-gamma"),
]


def cot(answer, **attrs):
    body = {letter: attrs.get(letter, "None") for letter in ("A", "B", "C")}
    body["Reasoning"] = "scripted fixture"
    body["Answer"] = answer
    return json.dumps(body)


def pairwise(query, ref, yes):
    return {
        "image_labels": [query, ref],
        "prompt_contains": "Can you see",
        "response_text": json.dumps(
            {"Reasoning": "scripted fixture", "Answer": "yes" if yes else "no"}
        ),
        "yes_logit": 2.0 if yes else -1.0,
        "no_logit": -1.0 if yes else 2.0,
    }


SCRIPT = [
    {"image_labels": ["qa"], "prompt_contains": "Which description matches",
     "response_text": cot("A", A="red glaze, round body")},
    {"image_labels": ["qb"], "prompt_contains": "Which description matches",
     "response_text": cot("A", A="blue glaze, tall handle")},
    {"image_labels": ["qc"], "prompt_contains": "Which description matches",
     "response_text": cot("B", A="green glaze", B="red glaze")},
    {"image_labels": ["qx"], "prompt_contains": "Which description matches",
     "response_text": cot("A", A="green glaze")},
    pairwise("qc", "ref-alpha", False),
    pairwise("qc", "ref-beta", False),
    pairwise("qc", "ref-gamma", True),
    {"image_labels": ["qa"], "prompt_contains": "The main subject is alpha-mug",
     "response_text": "A photo of alpha-mug on a desk."},
    {"image_labels": ["qb"], "prompt_contains": "The main subject is beta-mug",
     "response_text": "A blue mug resting on a shelf."},
    {"image_labels": ["qa"], "prompt_contains": "Question: What color is this mug?",
     "response_text": "red"},
    {"image_labels": ["qb"], "prompt_contains": "Question: What color is this mug?",
     "response_text": "green"},
]

DATASET = {
    "concepts": [
        {"name": name, "category": "mug",
         "reference_image": f"images/{ref}.img", "query_images": []}
        for _, name, _, _, ref in CONCEPTS
    ],
    "tasks": {
        "recognition": [
            {"query_image": "images/qa.img", "target_name": "alpha-mug",
             "label": "pos"},
            {"query_image": "images/qb.img", "target_name": "beta-mug",
             "label": "pos"},
            {"query_image": "images/qc.img", "target_name": "gamma-mug",
             "label": "pos"},
            {"query_image": "images/qb.img", "target_name": "alpha-mug",
             "label": "neg"},
            {"query_image": "images/qc.img", "target_name": "beta-mug",
             "label": "neg"},
            {"query_image": "images/qx.img", "target_name": "gamma-mug",
             "label": "neg"},
        ],
        "caption": [
            {"query_image": "images/qa.img", "true_name": "alpha-mug"},
            {"query_image": "images/qb.img", "true_name": "beta-mug"},
        ],
        "vqa": [
            {"query_image": "images/qa.img",
             "question": "What color is this mug?",
             "choices": ["red", "blue", "green"], "gold": "red"},
            {"query_image": "images/qb.img",
             "question": "What color is this mug?",
             "choices": ["red", "blue", "green"], "gold": "blue"},
        ],
    },
}


def main() -> None:
    images_dir = HERE / "images"
    images_dir.mkdir(exist_ok=True)
    for label in ("ref-alpha", "ref-beta", "ref-gamma", "qa", "qb", "qc", "qx"):
        (images_dir / f"{label}.img").write_bytes(mock_image_bytes(label))

    (HERE / "encoder_fixture.json").write_text(
        json.dumps(VECTORS, indent=2) + "\n", encoding="utf-8"
    )
    (HERE / "vlm_script.json").write_text(
        json.dumps(SCRIPT, indent=2) + "\n", encoding="utf-8"
    )
    (HERE / "dataset.json").write_text(
        json.dumps(DATASET, indent=2) + "\n", encoding="utf-8"
    )

    encoder = MockEncoder(
        EncoderBackendConfig(kind="mock", model_id="fixture-encoder",
                             embedding_dim=DIM),
        fixture=VECTORS,
    )
    db = ConceptDatabase()
    clock = lambda: datetime(2026, 1, 1, tzinfo=timezone.utc)
    for cid, name, description, attrs, ref in CONCEPTS:
        enroll_with_privileged_attributes(
            (images_dir / f"{ref}.img").read_bytes(),
            name, "mug", attrs, description, db, encoder,
            image_path=f"images/{ref}.img", concept_id=cid, clock=clock,
        )
    db.save(HERE)
    print(f"fixture written under {HERE}")


if __name__ == "__main__":
    main()
