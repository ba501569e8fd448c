"""Sweep the MGU step size on a freshly trained default model.

Usage: python3 scripts/eta_sweep.py [seed] [eta ...]
Prints the EMPTY_SET fraction and iteration counts for each step size.
"""

import sys

from asl.mgu import MguConfig, eta_sweep
from asl.scenes import CorpusConfig, generate_corpus
from asl.segmodel import init_model, train_supervised


def main(argv):
    seed = int(argv[0]) if argv else 0
    etas = [float(a) for a in argv[1:]] or [0.05, 1.0, 5.0, 10.0, 20.0, 50.0]
    corpus = generate_corpus(CorpusConfig(seed=seed))
    model = init_model(3, 12, 1, (32, 32), seed=seed)
    model = train_supervised(model, corpus.train, epochs=10, lr=0.1, batch=256, seed=seed).model
    print("eta,empty_fraction,median_iterations,max_iterations")
    for row in eta_sweep(model, corpus.train, etas, MguConfig(seed=seed)):
        print(f"{row.step_size},{row.empty_fraction:.4f},{row.median_iterations},{row.max_iterations}")


if __name__ == "__main__":
    main(sys.argv[1:])
