"""Token grids and LLM prefill/decode cost for the 1024x768 scenario, plus a resolution scan."""
import argparse

from moenc.flops import QWEN25_7B, ScenarioSpec, load_zoo, prefill_flops, scenario_report, vision_token_count


def main():
    ap = argparse.ArgumentParser()
    ap.add_argument("--scan", action="store_true", help="also print S0 and prefill cost per encoder across resolutions")
    args = ap.parse_args()
    zoo, doc = load_zoo()
    print(scenario_report(ScenarioSpec(shared=doc["shared"]), zoo, QWEN25_7B, doc["reference_llm_tflops"]).render())
    if args.scan:
        print()
        print(f"{'size':>10} " + " ".join(f"{n:>17}" for n in zoo))
        for side in (224, 448, 672, 896, 1344):
            cells = []
            for spec in zoo.values():
                s0 = vision_token_count(spec, side, side) + 64
                cells.append(f"{s0:>6} {prefill_flops(QWEN25_7B, s0) / 1e12:>8.2f}TF")
            print(f"{side}x{side:<5} " + " ".join(cells))


if __name__ == "__main__":
    main()
