"""Exception hierarchy shared by all solver modules."""


class MFGError(Exception):
    """Base error; carries enough context for the CLI's JSON error report."""

    module = "mfgfinite"
    op = ""

    def __init__(self, message, *, op=None, context=None):
        super().__init__(message)
        if op is not None:
            self.op = op
        self.context = dict(context or {})

    def origin(self):
        """Module name of the raising frame, unless a subclass pins one."""
        if self.module != MFGError.module or self.__traceback__ is None:
            return self.module
        tb = self.__traceback__
        while tb.tb_next is not None:
            tb = tb.tb_next
        name = tb.tb_frame.f_globals.get("__name__", self.module)
        return name.rsplit(".", 1)[-1]

    def to_dict(self):
        return {
            "module": self.origin(),
            "op": self.op,
            "message": str(self),
            "context": self.context,
        }


class ModelConfigError(MFGError, ValueError):
    module = "model"


class InputError(MFGError, ValueError):
    pass


class DivergenceError(MFGError, ArithmeticError):
    pass


class IntegrationError(MFGError, ArithmeticError):
    pass


class ConvergenceError(MFGError, RuntimeError):
    def __init__(self, message, *, last_update=None, **kw):
        super().__init__(message, **kw)
        self.last_update = last_update
        if last_update is not None:
            self.context.setdefault("last_update", float(last_update))


class SizeGuardError(MFGError, ValueError):
    module = "nplayer"
