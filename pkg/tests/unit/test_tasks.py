"""
Unit tests for the synthetic tasks and the character tokenizer.
"""

import pytest

from src.core.errors import ConfigError
from src.harness.tasks import (ALPHABET, CharTokenizer, TaskKind, TaskSizes, exact_match,
                               load_tasks, make_task, oracle_answer, split_of,
                               truncate_at_eos)


class TestTokenizer:
    """Test the character tokenizer."""

    def test_vocab(self, tokenizer):
        assert tokenizer.vocab_size == len(ALPHABET)
        assert tokenizer.decode([tokenizer.bos_id, tokenizer.eos_id, tokenizer.pad_id]) == "^$_"

    def test_encode_decode(self, tokenizer):
        assert tokenizer.decode(tokenizer.encode("^Cab3=")) == "^Cab3="

    def test_unknown_character(self, tokenizer):
        with pytest.raises(ValueError, match="not in the alphabet"):
            tokenizer.encode("^C!=")

    def test_duplicate_alphabet(self):
        with pytest.raises(ConfigError):
            CharTokenizer("abca")


class TestTaskKind:
    """Test class ids and markers."""

    def test_class_ids_start_at_one(self):
        assert [kind.class_id for kind in TaskKind] == [1, 2, 3, 4]

    def test_markers_round_trip(self):
        for kind in TaskKind:
            assert TaskKind.from_marker(kind.marker) is kind


class TestMakeTask:
    """Test dataset generation."""

    @pytest.mark.parametrize("kind", [k.value for k in TaskKind])
    def test_deterministic(self, kind, small_sizes):
        first = make_task(kind, small_sizes, seed=3)
        second = make_task(kind, small_sizes, seed=3)
        assert first.train == second.train
        assert first.test == second.test

    @pytest.mark.parametrize("kind", [k.value for k in TaskKind])
    def test_splits_are_disjoint(self, kind, small_sizes):
        task = make_task(kind, small_sizes, seed=0)
        prompts = {name: {tuple(ex.prompt) for ex in task.split(name)}
                   for name in ("train", "val", "test")}

        assert not prompts["train"] & prompts["val"]
        assert not prompts["train"] & prompts["test"]
        assert not prompts["val"] & prompts["test"]
        assert sum(len(p) for p in prompts.values()) == small_sizes.n_examples

    def test_seed_changes_data(self, small_sizes):
        assert make_task("copy", small_sizes, seed=0).train != \
            make_task("copy", small_sizes, seed=1).train

    @pytest.mark.parametrize("kind", [k.value for k in TaskKind])
    def test_oracle_agrees(self, kind, tokenizer):
        sizes = TaskSizes(n_examples=100)
        task = make_task(kind, sizes, seed=0, tokenizer=tokenizer)
        for ex in (task.train + task.val + task.test)[:100]:
            prompt = tokenizer.decode(ex.prompt)
            assert oracle_answer(prompt, sizes.prime) == tokenizer.decode(ex.answer)
            assert ex.class_id == task.class_id

    def test_example_shape(self, copy_task, tokenizer, small_sizes):
        ex = copy_task.train[0]
        assert ex.prompt[0] == tokenizer.bos_id
        assert tokenizer.decode(ex.prompt[-1:]) == "="
        assert ex.answer[-1] == tokenizer.eos_id
        assert len(ex.answer) == small_sizes.payload_len + 1
        assert copy_task.max_len == len(ex.tokens)

    def test_unknown_split(self, copy_task):
        with pytest.raises(ValueError):
            copy_task.split("holdout")

    def test_load_tasks(self, small_sizes):
        tasks = load_tasks(["copy", "reverse"], small_sizes, seed=0)
        assert [t.kind for t in tasks] == [TaskKind.COPY, TaskKind.REVERSE]
        assert tasks[0].tokenizer is tasks[1].tokenizer


class TestVocabularyLimits:
    """Test size checks against the vocabulary."""

    def test_too_many_symbols(self):
        with pytest.raises(ConfigError) as excinfo:
            make_task("copy", TaskSizes(n_symbols=27))
        assert excinfo.value.field == "n_symbols"

    def test_prime_needs_one_digit(self):
        with pytest.raises(ConfigError) as excinfo:
            make_task("modular_sum", TaskSizes(prime=11))
        assert excinfo.value.field == "prime"

    def test_keys_need_symbols(self):
        with pytest.raises(ConfigError) as excinfo:
            make_task("keyed_recall", TaskSizes(n_pairs=6, n_symbols=5))
        assert excinfo.value.field == "n_pairs"

    def test_non_positive_sizes(self):
        with pytest.raises(ConfigError):
            TaskSizes(payload_len=0)


class TestOracle:
    """Test the independent answer oracle."""

    def test_modular_sum(self):
        assert oracle_answer("^M35=", prime=7) == "1$"

    def test_modular_sum_ignores_distractors(self):
        assert oracle_answer("^M3ab5=", prime=7) == "1$"

    def test_keyed_recall(self):
        assert oracle_answer("^Ka1b2?b=") == "2$"

    def test_copy_and_reverse(self):
        assert oracle_answer("^Cabc=") == "abc$"
        assert oracle_answer("^Rabc=") == "cba$"

    def test_malformed(self):
        with pytest.raises(ValueError):
            oracle_answer("Cabc")


class TestScoring:
    """Test exact-match scoring."""

    def test_truncate_at_eos(self):
        assert truncate_at_eos([5, 6, 2, 7], eos_id=2) == [5, 6, 2]
        assert truncate_at_eos([5, 6], eos_id=2) == [5, 6]

    def test_exact_match(self):
        assert exact_match([5, 6, 2, 9, 9], [5, 6, 2], eos_id=2)
        assert not exact_match([5, 7, 2], [5, 6, 2], eos_id=2)
        assert not exact_match([5, 6], [5, 6, 2], eos_id=2)

    def test_split_of_is_stable(self):
        assert split_of("^Cabc=", 0) == split_of("^Cabc=", 0)
        assert split_of("^Cabc=", 0) in ("train", "val", "test")
