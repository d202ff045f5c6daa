"""Few-shot anomaly detection over precomputed feature grids.

Library layout:
    autodiff     reverse-mode tensor engine (float64)
    feature_io   binary feature/mask formats, manifests, synthetic tasks
    semantic     support-conditioned prompt induction and margins
    hypergraph   dual-guidance hyperedge construction and the Laplacian
    reasoning    hypergraph convolution layers and the node head
    inference    anomaly maps, fusion, soft-histogram image scoring
    losses       training objective and the gradient checker
    train        SGD loop, checkpoints, AUROC evaluation
    cli          synth / train / eval / infer / gradcheck / dump-graph
"""

__version__ = "0.1.0"
