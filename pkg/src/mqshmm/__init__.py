"""Two-scale magnetoquasistatic solver for soft magnetic composites.

The package couples a homogenized macroscale finite-element problem with
periodic mesoscale cell problems, one per Gauss point.  Two drivers are
provided: a monolithic scheme that re-solves every cell inside each
macroscale Newton iteration, and a waveform-relaxation scheme that
exchanges whole time-waveforms between the scales over time windows.
"""

__version__ = "0.1.0"
