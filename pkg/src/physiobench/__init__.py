"""1D CNN/attention benchmark harness for physiological waveforms.

Subpackages/modules:

* ``core`` — numpy autodiff engine (tensors, layers, gradient checking)
* ``attention`` — SE / non-local / CBAM blocks and the MSA encoder
* ``backbones`` — level-truncated VGG/ResNet/Inception/MSA models + planning
* ``datapipe`` — task rules, synthetic generator, binary dataset container
* ``harness`` — training loop, metrics, convergence timing, seeded sweeps
* ``cli`` — command-line front end
"""

__version__ = "0.1.0"
