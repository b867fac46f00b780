"""
run_cosegmentation_pipeline.py
------------------------------
End-to-end run on a planted synthetic dataset: synth -> train -> infer -> eval.
Outputs land in the directory given as the first argument (default: coseg_output).

Usage:
    python run_cosegmentation_pipeline.py [output_dir] [seed]
"""

import os
import sys
from datetime import datetime

# Add parent directory to path
sys.path.append(os.path.dirname(os.path.abspath(__file__)))

from backend.cli import main


def run_pipeline(output_dir='coseg_output', seed=0, threads=1):
    """Run the 4-step synthetic pipeline; returns the first nonzero exit code, or 0."""

    start_time = datetime.now()
    os.makedirs(output_dir, exist_ok=True)

    def path(name):
        return os.path.join(output_dir, name)

    print("\n" + "=" * 60)
    print("CO-SEGMENTATION PIPELINE")
    print("=" * 60 + "\n")

    steps = [
        ("Generating synthetic dataset",
         ['synth', '--output', path('synth.jsonl'), '--truth', path('truth.json'), '--seed', str(seed)]),
        ("Training CRF auto-encoder",
         ['train', path('synth.jsonl'), '--output', path('model.json'), '--progress', path('progress.jsonl'),
          '--seed', str(seed), '--threads', str(threads)]),
        ("Inferring foregrounds",
         ['infer', path('model.json'), path('synth.jsonl'), '--output', path('distributions.json'),
          '--selections', path('selections.json'), '--threads', str(threads)]),
        ("Scoring",
         ['eval', path('selections.json'), path('synth.jsonl'), '--output', path('score.json'),
          '--truth', path('truth.json'), '--distributions', path('distributions.json')]),
    ]

    for number, (title, args) in enumerate(steps, 1):
        print(f"Step {number}/{len(steps)}: {title}...")
        code = main(['--log-file', path('coseg.log')] + args)
        if code != 0:
            print(f"\n✗ Step {number} failed with exit code {code}")
            return code
        print(f"✓ {title} complete\n")

    elapsed = (datetime.now() - start_time).total_seconds()
    print("=" * 60)
    print(f"✓ Pipeline complete in {elapsed:.1f} seconds")
    print("=" * 60 + "\n")
    return 0


if __name__ == '__main__':
    out = sys.argv[1] if len(sys.argv) > 1 else 'coseg_output'
    seed = int(sys.argv[2]) if len(sys.argv) > 2 else 0
    sys.exit(run_pipeline(out, seed))
