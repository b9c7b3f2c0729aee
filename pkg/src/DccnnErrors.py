"""
  DccnnErrors - exception hierarchy of the dual convexified CNN toolkit

  Library modules raise these; only the command line entry point
  (dccnn.py) turns them into exit codes.
"""


class DccnnError(Exception):
  """base class of every error raised by the toolkit"""

  def __init__(self, message: str = "", layer_index: int = None):
    super().__init__(message)
    self.layer_index = layer_index

  def __str__(self) -> str:
    text = super().__str__()
    if self.layer_index is not None:
      return "layer " + str(self.layer_index) + ": " + text
    return text
# end class DccnnError


class InvalidInput(DccnnError):
  """shapes, ranges or enum values that do not fit together"""


class ConfigError(InvalidInput):
  """a command line flag or environment setting was rejected"""

  def __init__(self, flag: str, message: str):
    super().__init__(flag + " " + message)
    self.flag = flag


class NumericalError(DccnnError):
  """non-finite values or a broken numerical invariant"""


class InfeasibleDual(DccnnError):
  """a dual coefficient lies outside the conjugate domain of the loss"""

  def __init__(self, index, value: float):
    super().__init__("dual coefficient " + str(index) + " = " + repr(value) + " is infeasible")
    self.index = index
    self.value = value


class EmptyDataset(DccnnError):
  pass


class InfeasibleStart(DccnnError):
  pass


class NoFiltersRecovered(DccnnError):
  """no eigenvalue of the dual quadratic form reached the threshold"""

  def __init__(self, max_eigenvalue: float, threshold: float):
    super().__init__("no eigenvalue >= " + str(threshold)
                     + " (largest is " + repr(max_eigenvalue) + "); lower --threshold or raise --c")
    self.max_eigenvalue = max_eigenvalue
    self.threshold = threshold


class UnsupportedVersion(DccnnError):

  def __init__(self, version: int):
    super().__init__("unsupported model format version " + str(version))
    self.version = version


class CorruptStream(DccnnError):

  def __init__(self, offset: int, reason: str):
    super().__init__("corrupt model stream at byte " + str(offset) + ": " + reason)
    self.offset = offset


class BadMagic(DccnnError):

  def __init__(self, path: str, magic: int, expected: int):
    super().__init__("%s: magic 0x%08x, expected 0x%08x" % (path, magic, expected))
    self.magic = magic


class CountMismatch(DccnnError):
  pass


class TruncatedFile(DccnnError):
  pass


class InsufficientSamples(DccnnError):
  pass
