"""Exception hierarchy.

Every error carries a short stable ``code`` that the CLI prints to stderr.
"""


class ModalQAError(Exception):
    code = "E_MODALQA"


class PreconditionError(ModalQAError, ValueError):
    code = "E_PRECONDITION"


class ConfigError(ModalQAError):
    code = "E_CONFIG"


class BackendError(ModalQAError):
    """A chat call could not produce a completion."""

    code = "E_BACKEND"
    stage: str | None = None


class TransportError(BackendError):
    code = "E_TRANSPORT"


class AuthError(BackendError):
    code = "E_AUTH"


class ImageUnsupported(BackendError):
    code = "E_IMAGE_UNSUPPORTED"


class ReplayMiss(BackendError):
    code = "E_REPLAY_MISS"


class MissingPlaceholder(ModalQAError, KeyError):
    code = "E_TEMPLATE"

    def __init__(self, name: str):
        super().__init__(name)
        self.name = name

    def __str__(self) -> str:
        return f"unbound placeholder {{{self.name}}}"


class TemplateError(ModalQAError):
    code = "E_TEMPLATE"


class NothingToShuffle(ModalQAError, ValueError):
    code = "E_NOTHING_TO_SHUFFLE"


class EmptyDonorPool(ModalQAError, ValueError):
    code = "E_EMPTY_DONOR_POOL"


class MissingGold(ModalQAError, ValueError):
    code = "E_MISSING_GOLD"


class DanglingReference(ModalQAError):
    code = "E_DANGLING_REFERENCE"

    def __init__(self, record_id: str, detail: str = ""):
        super().__init__(f"{record_id}: {detail}" if detail else record_id)
        self.record_id = record_id


class DuplicateId(ModalQAError):
    code = "E_DUPLICATE_ID"

    def __init__(self, record_id: str):
        super().__init__(record_id)
        self.record_id = record_id
