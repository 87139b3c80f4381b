"""Testes do pacote sparsetrain."""
