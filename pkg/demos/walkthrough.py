"""From a scene to a scored reasoning trace, in one pass.

Run: python3 demos/walkthrough.py
"""

from __future__ import annotations

from corbench.dataset import build_instance, render_gold_trace, with_transcript
from corbench.grid import shipped_environment
from corbench.noise import CorruptionConfig, corrupt
from corbench.oracle import Relation
from corbench.traces import score_instance
from corbench.utterance import shipped_lexicon


def main() -> None:
    env = shipped_environment("gongguan")
    en = shipped_lexicon("en")

    # a user at Academic Building A names all four neighbours
    inst = build_instance(
        env,
        "Academic_Building_A",
        [
            (Relation.FRONT, "Student_Activity_Center_1"),
            (Relation.BACK, "Academic_Building_B"),
            (Relation.LEFT, "Parking_Lot_2"),
            (Relation.RIGHT, "Small_Plaza_2"),
        ],
        lexicon=en,
        instance_id="demo-1",
    )
    print("utterance :", inst.utterance)
    print("model input:", inst.multimodal_input)
    print("gold facing:", inst.facing.value)

    trace, text = render_gold_trace(inst, en)
    print("\n--- gold trace ---\n" + text)

    # the same sentence after simulated speech recognition
    noisy, achieved = corrupt(inst.utterance, CorruptionConfig(target_cer=0.10, seed=3), en)
    heard = with_transcript(inst, noisy, env)
    print(f"\ntranscript (CER {achieved:.3f}, {heard.severity}): {noisy}")

    # a model that extracted everything right but flipped the final rule
    wrong = text.replace("facing West", "facing East")
    for label, output in (("gold", text), ("flipped", wrong)):
        s = score_instance(heard, output, env)
        print(f"{label:>8}: correct={s.correct} steps={s.step_matches} taxonomy={sorted(s.taxonomy)}")


if __name__ == "__main__":
    main()
