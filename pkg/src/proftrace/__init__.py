"""Student proficiency models and an online response-prediction benchmark.

Subpackages:
  dataio      dataset ingestion, preprocessing, synthetic generation
  irt         one-parameter ogive model and its hierarchical extension
  tirt        temporal extension with response discounting
  dkt         recurrent knowledge tracer
  evaluation  splits, online protocol, metrics, sweeps, baseline
  cli         command-line front end
"""

__version__ = "0.1.0"
