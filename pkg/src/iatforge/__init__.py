"""Static malware detection from PE import/export address tables.

Modules:

* :mod:`iatforge.pe_format` -- PE parsing, table walks, structural checks
* :mod:`iatforge.features` -- pair registry, table vectors, bit encodings
* :mod:`iatforge.storage` -- canonical file formats
* :mod:`iatforge.knn` -- set-dissimilarity k-NN and iterative training
* :mod:`iatforge.combi` -- five-test combinatorial detector
* :mod:`iatforge.pipeline` / :mod:`iatforge.database` -- scanning and base directories
* :mod:`iatforge.evaluation` -- metrics and base-size sweeps
"""

__version__ = "0.1.0"
