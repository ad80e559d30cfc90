"""Build a personal concept database from scratch, then save and reload it.

Runs fully offline: the encoder is the deterministic mock and the chat model
is a scripted mock.  Two enrollment paths are shown — the standard one, where
the model extracts the fingerprint attributes from the reference image, and
the privileged one, where a human supplies them directly.
"""

import json
import tempfile
from pathlib import Path

from percept import (
    ConceptDatabase,
    EncoderBackendConfig,
    MockEncoder,
    ScriptedTurn,
    ScriptedVlm,
    enroll_concept,
    enroll_with_privileged_attributes,
    mock_image_bytes,
)

# the scripted "model" answers the enrollment prompt with the JSON reply the
# protocol expects: a one-sentence description plus distinct features
vlm = ScriptedVlm([
    ScriptedTurn(
        prompt_contains="concept-identifier Sleeping Shiba",
        response_text=json.dumps({
            "general": "A cream-colored plush shiba curled up asleep.",
            "category": "Stuffed animal",
            "distinct features": [
                "curled sleeping pose", "cream fur", "brown patch on left ear",
            ],
        }),
    ),
])

encoder = MockEncoder(
    EncoderBackendConfig(kind="mock", model_id="demo-encoder", embedding_dim=16)
)

db = ConceptDatabase()

print("== standard enrollment (model extracts the fingerprint) ==")
record = enroll_concept(
    mock_image_bytes("shiba-reference-photo"),
    "Sleeping Shiba",
    "Stuffed animal",
    db, vlm, encoder,
)
print(f"enrolled {record.name!r} ({record.concept_id})")
print(f"  description: {record.description}")
print(f"  attributes:  {list(record.attributes)}")

print()
print("== privileged enrollment (human-specified attributes, no model call) ==")
record = enroll_with_privileged_attributes(
    mock_image_bytes("bottle-reference-photo"),
    "Dented Bottle",
    "Water bottle",
    ["steel body", "dent near the cap", "red carry loop"],
    "a brushed-steel water bottle with a dent near the cap",
    db, encoder,
)
print(f"enrolled {record.name!r} ({record.concept_id})")
print(f"  attributes:  {list(record.attributes)}")

print()
print("== persistence round trip ==")
with tempfile.TemporaryDirectory() as tmp:
    path = Path(tmp) / "my-concepts"
    db.save(path)
    print(f"saved {len(db)} records to {path}")
    print("on-disk layout:", sorted(p.name for p in path.iterdir()))
    loaded = ConceptDatabase.load(path)
    print(f"reloaded {len(loaded)} records; manifest:",
          loaded.manifest().to_json_dict())
    assert loaded.snapshot() == db.snapshot()
    print("round trip is field-exact")
