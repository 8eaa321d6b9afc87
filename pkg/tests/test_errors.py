import pytest

from phi4ce.errors import (CapabilityError, ConfigError, DomainError, ExpansionError, NonContractionError,
                           SingularityError)


class TestHierarchy:
    @pytest.mark.parametrize("cls", [DomainError, SingularityError, CapabilityError, NonContractionError,
                                     ConfigError])
    def test_all_derive_from_expansion_error(self, cls):
        assert issubclass(cls, ExpansionError)

    def test_value_errors(self):
        assert issubclass(DomainError, ValueError)
        assert issubclass(ConfigError, ValueError)
        assert issubclass(SingularityError, DomainError)

    def test_non_contraction_keeps_residuals(self):
        err = NonContractionError("stalled", residuals=[1.0, 2.0])
        assert isinstance(err, RuntimeError)
        assert err.residuals == [1.0, 2.0]
        assert str(err) == "stalled"
