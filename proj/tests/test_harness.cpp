#include <gtest/gtest.h>
TEST(P, t) { SUCCEED(); }
