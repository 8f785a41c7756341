"""Power- and timing-aware selection of weight and activation values for MAC arrays.

Modules: :mod:`netlist` (gate-level MAC generation), :mod:`engine` (simulation
and timing analysis), :mod:`workload` (systolic-array execution and array
power), :mod:`characterize` (per-weight power/delay profiles), :mod:`select`
(value selection and voltage scaling), :mod:`qnn` (restricted quantized
training) and :mod:`cli`.
"""
__version__ = "0.1.0"
