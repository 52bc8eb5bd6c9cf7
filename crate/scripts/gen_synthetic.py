"""Regenerate the bundled synthetic datasets under crates/core/assets/synthetic.

Output is deterministic (fixed seed), so re-running produces identical files.
"""
import json
import random
from pathlib import Path

OUT = Path(__file__).resolve().parent.parent / "crates" / "core" / "assets" / "synthetic"

QUESTIONS = [
    (
        "q-stack",
        "Explain what a stack is and name two operations it supports.",
        "A stack is a LIFO collection supporting push and pop.",
        [
            "A stack is a last in first out structure. You push items on top and pop them off the top.",
            "Stacks store elements in LIFO order; the main operations are push and pop, plus peek.",
            "It is a list where the last element added is the first removed, using push and pop.",
            "A stack is like a queue but items come out in the order they went in.",
            "A data structure. Operations are insert and delete.",
            "Stack means memory on the call stack where functions live.",
            "LIFO container with push to add and pop to remove the top element.",
            "I think a stack is a tree where each node has two children.",
        ],
    ),
    (
        "q-tcp",
        "Describe how TCP's three-way handshake establishes a connection.",
        None,
        [
            "The client sends SYN, the server answers SYN-ACK, and the client replies ACK, after which data flows.",
            "SYN then SYN ACK then ACK. Both sides agree on initial sequence numbers.",
            "The handshake exchanges three packets so both ends synchronize sequence numbers before sending data.",
            "The server sends a hello and the client says ok.",
            "TCP uses a handshake to encrypt the connection with a shared key.",
            "Client sends SYN with its sequence number, server acknowledges and sends its own SYN, client acknowledges.",
            "It opens a port and waits for packets.",
            "Three messages: request, response, confirmation, so both know the other is ready.",
        ],
    ),
    (
        "q-photo",
        "What does a plant need for photosynthesis, and what does it produce?",
        "Light, water and carbon dioxide; it produces glucose and oxygen.",
        [
            "Plants need sunlight, water and carbon dioxide, and they make sugar and oxygen.",
            "Light energy turns water and CO2 into glucose, releasing oxygen.",
            "Plants need soil and they produce flowers.",
            "Sunlight and water, and it produces oxygen.",
            "Photosynthesis uses chlorophyll to capture light and turns carbon dioxide and water into glucose.",
            "It needs oxygen and makes carbon dioxide, like breathing.",
            "Plants use light to make food for themselves.",
            "Water, air and sun give the plant energy and it releases oxygen as waste.",
        ],
    ),
]

# gold grade on a 0..5 scale for each base answer above
BASE_GOLD = [
    [5, 5, 4.5, 1, 2, 0, 5, 0],
    [5, 4.5, 4, 1, 0.5, 5, 0, 3],
    [5, 5, 0.5, 3, 5, 0, 2, 3],
]

FILLERS = [
    "",
    " I hope this is right.",
    " This is from the lecture notes.",
    " In summary, that is the idea.",
    " (answered quickly)",
    " Not fully sure about the details.",
]


def asag_dataset(rng):
    lines = []
    for (qid, prompt, reference, answers), golds in zip(QUESTIONS, BASE_GOLD):
        q = {"type": "question", "question_id": qid, "prompt_text": prompt}
        if reference is not None:
            q["reference_solution"] = reference
        lines.append(q)
    for qi, ((qid, _, _, answers), golds) in enumerate(zip(QUESTIONS, BASE_GOLD)):
        for i in range(20):
            base = i % len(answers)
            text = answers[base] + FILLERS[(i // len(answers) + qi) % len(FILLERS)]
            if i >= 2 * len(answers):
                text = text.lower()
            gold = golds[base]
            if i >= len(answers) and gold not in (0, 5):
                gold = max(0.0, min(5.0, gold + rng.choice([-0.5, 0.0, 0.5])))
            lines.append(
                {
                    "type": "submission",
                    "submission_id": f"{qid}-{i:02d}",
                    "question_id": qid,
                    "response_text": text,
                    "gold_raw": gold,
                }
            )
    return lines


RUBRIC_STEPS = [
    "For the base case n = 1, we check the statement.",
    "When n = 1 the left side is 1 and the right side is 1, so it holds.",
    "Assume the statement holds for n = k.",
    "Here k is an integer with k >= 1.",
    "We want to show it holds for n = k + 1.",
    "Split the sum for k + 1 into the sum up to k plus the last term.",
    "By the inductive hypothesis the sum up to k equals the formula, which simplifies to the claim for k + 1.",
]

PROOF_QUESTIONS = [
    ("q-sum", "Prove by induction that 1 + 2 + ... + n = n(n+1)/2 for all n >= 1."),
    ("q-odd", "Prove by induction that the sum of the first n odd numbers is n^2 for all n >= 1."),
]


def proof_dataset(rng):
    rubric = json.loads((OUT.parent / "rubrics" / "induction.json").read_text())
    lines = []
    for qid, prompt in PROOF_QUESTIONS:
        lines.append({"type": "question", "question_id": qid, "prompt_text": prompt, "rubric": rubric})
    for qid, _ in PROOF_QUESTIONS:
        for i in range(12):
            mask = [rng.random() < 0.7 for _ in range(7)]
            text = " ".join(step for step, keep in zip(RUBRIC_STEPS, mask) if keep) or "I do not know."
            lines.append(
                {
                    "type": "submission",
                    "submission_id": f"{qid}-{i:02d}",
                    "question_id": qid,
                    "response_text": f"Attempt {i}. " + text,
                    "gold_raw": sum(mask),
                    "gold_items": {str(n + 1): keep for n, keep in enumerate(mask)},
                }
            )
    return lines


def write(name, lines, descriptor):
    with open(OUT / f"{name}.jsonl", "w", encoding="utf-8") as fh:
        for line in lines:
            fh.write(json.dumps(line, ensure_ascii=False) + "\n")
    with open(OUT / f"{name}.descriptor.json", "w", encoding="utf-8") as fh:
        fh.write(json.dumps(descriptor, indent=2) + "\n")


if __name__ == "__main__":
    rng = random.Random(20240901)
    write("short_answers", asag_dataset(rng), {"name": "synthetic-short-answers", "scale": {"kind": "numeric-range", "min": 0, "max": 5}})
    write("induction_proofs", proof_dataset(rng), {"name": "synthetic-induction-proofs", "scale": {"kind": "numeric-range", "min": 0, "max": 7}})
