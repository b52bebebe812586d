"""Regenerate the trainer's test fixtures from the dataset-side package.

Run from the repository root with the `drs` package importable:

    PYTHONPATH=src python3 trainer/scripts/make_fixtures.py

Outputs (committed, so trainer tests never import the other package):
    trainer/tests/fixtures/plan_default.json    phase plan, base epochs 8
    trainer/tests/fixtures/artifacts.jsonl      50 samples x 4 phases, byte-level
    trainer/tests/fixtures/nll_cases.jsonl      100 {values, mask, expected} rows
"""

import json
import random
from pathlib import Path

from drs import curriculum, schema, spanmask

FIXTURES = Path(__file__).resolve().parent.parent / "tests" / "fixtures"

WORDS = ["towel", "ring", "tram", "curb", "lamp", "bike", "shelf", "door", "van", "sign"]
RELATIONS = ["on", "under", "left_of", "right_of", "near", "behind", "attached_to"]


def random_annotation(rng):
    def phrase():
        return " ".join(rng.sample(WORDS, rng.randint(1, 2)))

    entities = [phrase() for _ in range(rng.randint(1, 3))]
    edges = tuple(
        schema.Triplet(rng.choice(entities), rng.choice(RELATIONS), rng.choice(entities))
        for _ in range(rng.randint(1, 3))
    )
    chain = tuple(
        schema.StagedStep(stage, f"{stage.value.lower()} {phrase()}")
        for stage in schema.STAGE_ORDER
    )
    answer = rng.choice(["A", "B", "A,C", "white", "no rack"])
    return schema.StructuredAnnotation(tuple(entities), edges, chain, answer)


def main():
    FIXTURES.mkdir(parents=True, exist_ok=True)
    rng = random.Random(20240801)

    curriculum.save_plan(curriculum.default_plan(), FIXTURES / "plan_default.json", base_epochs=8.0)

    targets = []
    for i in range(50):
        annotation = random_annotation(rng)
        targets.append(spanmask.RenderedTarget.from_annotation(f"toy{i:03d}", annotation))
    tokenizations = {t.sample_id: spanmask.chunk_tokenization(t.text, 1) for t in targets}
    written, failures = spanmask.emit_artifacts(
        targets, tokenizations, (1, 2, 3, 4), FIXTURES / "artifacts.jsonl"
    )
    assert written == 200 and not failures, (written, failures)

    with open(FIXTURES / "nll_cases.jsonl", "w", encoding="utf-8") as fh:
        for _ in range(100):
            n = rng.randint(1, 40)
            values = [-rng.random() * 6 for _ in range(n)]
            mask = [rng.randint(0, 1) for _ in range(n)]
            expected = spanmask.masked_nll(values, mask)
            fh.write(json.dumps({"values": values, "mask": mask, "expected": expected}) + "\n")

    print(f"fixtures written to {FIXTURES}")


if __name__ == "__main__":
    main()
