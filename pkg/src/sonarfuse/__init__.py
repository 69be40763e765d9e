"""Reference-free enhancement of forward-looking sonar image sequences.

Submodules:
    imagecore     image containers, polar geometry, resampling, file I/O
    featurebank   handcrafted feature maps (HOG, Canny, GRE, Haar)
    scatterbridge wavelet scattering feature bridge with learnable offsets
    fusenet       multi-frame fusion network and checkpoints
    training      self-supervised losses and the optimisation loop
    sonarsim      synthetic sonar sequence generator
    metrics       no-reference quality metrics and evaluation
    cli           command line entry point
"""

__version__ = "0.1.0"
