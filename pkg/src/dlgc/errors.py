"""Exception hierarchy shared by every dlgc module."""
from __future__ import annotations


class DlgcError(Exception):
    """Base class for all errors raised by dlgc."""


# -- types ------------------------------------------------------------------

class UnknownUnit(DlgcError):
    pass


class UnitClassMismatch(DlgcError):
    pass


class TypeMismatch(DlgcError):
    pass


class UnsupportedOperator(DlgcError):
    pass


class UnknownEntity(DlgcError):
    pass


class AmbiguousEntity(DlgcError):
    pass


# -- syntax -----------------------------------------------------------------

class LexError(DlgcError):
    def __init__(self, message, span):
        super().__init__(f"{span}: {message}")
        self.span = span
        self.message = message


class ParseError(DlgcError):
    def __init__(self, message, span, expected=(), found=None):
        exp = ", ".join(sorted(set(expected)))
        text = message if not exp else f"{message} (expected {exp})"
        super().__init__(f"{span}: {text}")
        self.span = span
        self.message = text
        self.expected = tuple(sorted(set(expected)))
        self.found = found


# -- typecheck --------------------------------------------------------------

class SignatureMismatch(DlgcError):
    pass


class TypeCheckError(DlgcError):
    """Raised with the full list of diagnostics collected by the checker."""

    def __init__(self, diagnostics):
        self.diagnostics = list(diagnostics)
        super().__init__("\n".join(str(d) for d in self.diagnostics))


# -- canonical --------------------------------------------------------------

class FilterTooLarge(DlgcError):
    pass


# -- skills -----------------------------------------------------------------

class DataValidation(DlgcError):
    def __init__(self, field, expected, got, where=""):
        prefix = f"{where}: " if where else ""
        super().__init__(f"{prefix}field {field!r}: expected {expected}, got {got!r}")
        self.field = field
        self.expected = expected
        self.got = got


class MissingDataFile(DlgcError):
    pass


class DuplicateSkill(DlgcError):
    pass


class UnknownClass(DlgcError):
    pass


class UnknownQuery(DlgcError):
    pass


class LoaderError(DlgcError):
    pass


# -- exec -------------------------------------------------------------------

class NonConcreteClass(DlgcError):
    pass


class EmptyAggregate(DlgcError):
    pass


class BackendFailure(DlgcError):
    pass


class MissingParameter(DlgcError):
    def __init__(self, name):
        super().__init__(f"missing required parameter {name!r}")
        self.name = name


# -- dialogue / synth -------------------------------------------------------

class NothingToConfirm(DlgcError):
    pass


class Unparseable(DlgcError):
    def __init__(self, utterance):
        super().__init__(f"cannot interpret {utterance!r}")
        self.utterance = utterance


class TemplateError(DlgcError):
    pass


class DuplicateTemplateId(TemplateError):
    pass


class UnknownHoleCategory(TemplateError):
    pass
