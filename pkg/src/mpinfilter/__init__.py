"""Audio classification with margin propagation and no multiplier in the inference path.

Submodules:

* ``mp``: the margin-propagation primitive, its gradient and MP inner products;
* ``filterbank``: Greenwood-spaced octave FIR bank and kernel extraction;
* ``kernel_machine``: MP-domain scoring and decision readout;
* ``trainer``: MP-aware training, quantization and bit-width sweeps;
* ``fixedpoint``: saturating integer arithmetic and the audited integer pipeline;
* ``data``, ``modelio``, ``response``, ``cli``: ingestion, model files, chirp analysis, command line.
"""

__version__ = "0.1.0"
