import unittest

from app.utils.types import (
    BINARY_TASKS,
    TOKEN_TYPE_ORDER,
    Precision,
    ScheduleKind,
    Split,
    TaskKind,
    TokenType,
    validate_dict,
)


class TestTypes(unittest.TestCase):
    def test_binary_tasks(self):
        self.assertEqual(
            [k.value for k in BINARY_TASKS], ["visual_attr", "word_rec", "structure", "figure"]
        )
        self.assertFalse(TaskKind.DOC_QA.is_binary)

    def test_token_type_export_order(self):
        self.assertEqual([t.value for t in TOKEN_TYPE_ORDER], ["image", "text", "all", "last"])
        self.assertEqual(set(TOKEN_TYPE_ORDER), set(TokenType))

    def test_string_enums(self):
        self.assertIs(Split("test"), Split.TEST)
        self.assertEqual(Precision.F32, "f32")
        self.assertEqual(ScheduleKind("cosine"), ScheduleKind.COSINE)

    def test_validate_dict(self):
        self.assertTrue(validate_dict({"a": 1, "b": 2}, ["a", "b"]))
        self.assertFalse(validate_dict({"a": 1}, ["a", "b"]))


if __name__ == "__main__":
    unittest.main()
