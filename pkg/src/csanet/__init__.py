"""Channel attention driven by the spatial autocorrelation of feature maps.

Layout:
    tensor_ops     dense float64 array primitives and their shape contracts
    spatial_stats  contiguity/weight matrices and local/global Moran statistics
    autodiff       minimal reverse-mode AD engine, SGD, finite-difference checks
    attention      the spatially-autocorrelated gate, an SE baseline, recalibration
    data           IDX file ingestion and the seeded synthetic bars task
    models         toy CNN variants (baseline | se | csa)
    train          training loop, evaluation, checkpoints, run reports
    analysis       per-stage class-averaged descriptor extraction (CSV)
    selftest       named property suites reused by the CLI and the test suite
    cli            command-line entry point (train/eval/analyze/gradcheck/selftest/compare)
"""

__version__ = "0.1.0"
