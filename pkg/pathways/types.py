#!/usr/bin/env python3

from typing import NewType

import numpy as np

ClassIndex = NewType('ClassIndex', int)

# Network-wide flat neuron index, hidden layers concatenated in order
FlatIndex = NewType('FlatIndex', int)

# Boolean vector over all N hidden neurons, True iff the neuron is strictly positive
ActivationPattern = NewType('ActivationPattern', np.ndarray)

# Pixel sites ordered first-to-remove first, length H*W
PixelRanking = NewType('PixelRanking', np.ndarray)
