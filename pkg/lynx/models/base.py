from typing import Any, Type, TypeVar

from pydantic import BaseModel, ConfigDict, ValidationError

from ..exceptions import ConfigurationError

ModelT = TypeVar("ModelT", bound="LynxModel")


class LynxModel(BaseModel):
    """Immutable base for every parameter record"""

    model_config = ConfigDict(frozen=True, extra="forbid", arbitrary_types_allowed=True)

    @classmethod
    def build(cls: Type[ModelT], **kwargs: Any) -> ModelT:
        """Construct and translate validation failures into ConfigurationError"""
        try:
            return cls(**kwargs)
        except ValidationError as e:
            problems = "; ".join(
                f"{'.'.join(str(p) for p in err['loc']) or cls.__name__}: {err['msg']}" for err in e.errors()
            )
            raise ConfigurationError(f"invalid {cls.__name__}: {problems}") from e
