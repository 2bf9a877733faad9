#!/usr/bin/env python3
"""
Decomposed Meta-Learning NER command-line runner

Runs the package CLI straight from a source checkout, without installing:

    ./decomposed_meta_ner_cli.py synthesize --output-dir data/synthetic
    ./decomposed_meta_ner_cli.py sample --corpus data/synthetic/train.conll \
        --output data/train.jsonl --split train
    ./decomposed_meta_ner_cli.py train-span --config run.yaml
    ./decomposed_meta_ner_cli.py train-typing --config run.yaml
    ./decomposed_meta_ner_cli.py eval --config run.yaml --workers 4
"""

import asyncio
import sys
from pathlib import Path

# Configure system path before imports
sys.path.insert(0, str(Path(__file__).parent / "src"))

# Import after path configuration
from decomposed_meta_ner.cli import main  # noqa: E402

if __name__ == "__main__":
    sys.exit(asyncio.run(main()))
