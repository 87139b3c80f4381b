"""
Exceções do toolkit de treinamento esparso.

Todas derivam de SparseTrainError para que a CLI possa tratá-las de forma
uniforme; as subclasses também herdam da exceção padrão mais próxima
(ValueError, KeyError, ArithmeticError) para quem já captura essas.
"""


class SparseTrainError(Exception):
    """Erro base do pacote."""


class DimensionError(SparseTrainError, ValueError):
    """Dimensões incompatíveis ou não divisíveis pelo tamanho do bloco."""


class DegenerateSparsityError(SparseTrainError, ValueError):
    """A máscara ficaria sem nenhum bloco ativo."""


class MaskError(SparseTrainError, ValueError):
    """Máscaras inconsistentes, coordenada fora da máscara ou blocos insuficientes."""


class DivergenceError(SparseTrainError, ArithmeticError):
    """Loss, gradiente ou atualização não finitos."""


class UnknownLayerError(SparseTrainError, KeyError):
    """Camada não registrada."""


class ScheduleError(SparseTrainError, ValueError):
    """Passo ou índice de atualização fora do intervalo válido."""


class ConfigError(SparseTrainError, ValueError):
    """Arquivo de configuração inválido."""
