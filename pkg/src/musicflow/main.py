from __future__ import annotations

import argparse
import json
import logging
import sys
from pathlib import Path
from typing import Any

from musicflow.pipeline.experiments import cmd_ablate, cmd_sweep_guidance
from musicflow.pipeline.stages import ConditionSources, cmd_evaluate, cmd_fit_codec, cmd_generate, cmd_synth, cmd_train
from musicflow.utils.config import RunConfig
from musicflow.utils.errors import MusicflowError
from musicflow.utils.playback import play_wav
from musicflow.utils.settings import AblationAxis, Command

# Where --out lands for each command
OUT_KEYS = {
    Command.SYNTH: "corpus_dir",
    Command.FIT_CODEC: "codec_path",
    Command.TRAIN: "run_dir",
    Command.GENERATE: "out_dir",
    Command.EVALUATE: "out_dir",
    Command.ABLATE: "run_dir",
    Command.SWEEP_GUIDANCE: "out_dir",
}


def build_parser() -> argparse.ArgumentParser:
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--config", type=Path, help="key = value run configuration file")
    common.add_argument("--seed", type=int)
    common.add_argument("--out", type=Path, help="output location of the command")
    common.add_argument("--steps", type=int, help="training steps")
    common.add_argument("--alpha", type=float, nargs=3, metavar=("TEXT", "LOCAL", "BOTH"), help="guidance weights")
    common.add_argument("--rtol", type=float)
    common.add_argument("--atol", type=float)
    common.add_argument("--force", action="store_true", help="rerun even if the run record matches")
    common.add_argument("--log-level", default="INFO", choices=["DEBUG", "INFO", "WARNING", "ERROR"])
    common.add_argument("-v", "--verbose", action="store_true", help="same as --log-level DEBUG")

    parser = argparse.ArgumentParser(prog="musicflow", description="Temporally controlled toy music generation")
    sub = parser.add_subparsers(dest="command", required=True)

    synth = sub.add_parser(Command.SYNTH.value, parents=[common], help="render the synthetic corpus")
    synth.add_argument("--n", type=int, dest="corpus_size", help="number of clips")
    synth.add_argument("--workers", type=int)

    sub.add_parser(Command.FIT_CODEC.value, parents=[common], help="fit the latent codec")
    sub.add_parser(Command.TRAIN.value, parents=[common], help="train the vector field")

    gen = sub.add_parser(Command.GENERATE.value, parents=[common], help="sample clips")
    gen.add_argument("--chords", type=Path, help="JSON list of per-frame chord labels or names")
    gen.add_argument("--melody", type=Path, help="JSON list of per-frame MIDI notes (-1 for rests)")
    gen.add_argument("--audio", type=Path, help="WAV for the blurred audio condition")
    gen.add_argument("--drums", type=Path, help="WAV drum stem")
    gen.add_argument("--inpaint", type=Path, help="WAV to in/out-paint")
    gen.add_argument("--style", type=int, help="style tag")
    gen.add_argument("--n", type=int, default=1, help="samples when sources are given")
    gen.add_argument("--self-eval", action="store_true", help="score adherence to the given controls")

    evaluate = sub.add_parser(Command.EVALUATE.value, parents=[common], help="score generated clips")
    evaluate.add_argument("--gen-dir", type=Path, help="directory of generated clips (default: out_dir)")

    ablate = sub.add_parser(Command.ABLATE.value, parents=[common], help="paired-arm ablation")
    ablate.add_argument("axis", choices=[axis.value for axis in AblationAxis])

    sub.add_parser(Command.SWEEP_GUIDANCE.value, parents=[common], help="guidance weight grid")

    preview = sub.add_parser(Command.PREVIEW.value, parents=[common], help="play a WAV (needs pygame-ce)")
    preview.add_argument("wav", type=Path)
    return parser


class Harness:
    def __init__(self, argv: list[str] | None = None) -> None:
        self.args = build_parser().parse_args(argv)
        level = logging.DEBUG if self.args.verbose else getattr(logging, self.args.log_level)
        logging.basicConfig(level=level, format="%(levelname)s %(name)s: %(message)s")

        self.command = Command(self.args.command)
        self.cfg = self.load_config()
        logging.debug(f"Command {self.command}, config digest {self.cfg.digest()[:12]}")

    def load_config(self) -> RunConfig:
        args = self.args
        overrides: dict[str, Any] = {
            "seed": args.seed,
            "steps": args.steps,
            "rtol": args.rtol,
            "atol": args.atol,
            "corpus_size": getattr(args, "corpus_size", None),
            "workers": getattr(args, "workers", None),
        }
        if args.alpha is not None:
            overrides.update(alpha_text=args.alpha[0], alpha_local=args.alpha[1], alpha_both=args.alpha[2])
        if args.out is not None and self.command in OUT_KEYS:
            overrides[OUT_KEYS[self.command]] = str(args.out)
        return RunConfig.from_file(args.config, **overrides)

    def run(self) -> Any:
        args, cfg = self.args, self.cfg
        match self.command:
            case Command.SYNTH:
                return len(cmd_synth(cfg, args.force))
            case Command.FIT_CODEC:
                cmd_fit_codec(cfg, args.force)
                return str(cfg.codec_path)
            case Command.TRAIN:
                result = cmd_train(cfg, args.force)
                return {"steps": len(result.losses), "skipped": result.skipped}
            case Command.GENERATE:
                sources = ConditionSources(
                    chords=args.chords,
                    melody=args.melody,
                    audio=args.audio,
                    drums=args.drums,
                    inpaint=args.inpaint,
                    style=args.style,
                    n=args.n,
                )
                return [str(p) for p in cmd_generate(cfg, sources, args.self_eval, args.force)]
            case Command.EVALUATE:
                report = cmd_evaluate(cfg, args.gen_dir, args.force)
                return {"n": report["n"], "frechet_distance": report["frechet_distance"]}
            case Command.ABLATE:
                return cmd_ablate(cfg, args.axis, args.force)["arms"]
            case Command.SWEEP_GUIDANCE:
                return [row["label"] for row in cmd_sweep_guidance(cfg, args.force)]
            case Command.PREVIEW:
                return play_wav(args.wav)


def main(argv: list[str] | None = None) -> int:
    try:
        harness = Harness(argv)
        result = harness.run()
    except (MusicflowError, ValueError, OSError) as err:
        print(json.dumps({"error": type(err).__name__, "message": str(err)}), file=sys.stderr)
        return 1
    logging.debug(f"Result: {result}")
    return 0


if __name__ == "__main__":
    sys.exit(main())
