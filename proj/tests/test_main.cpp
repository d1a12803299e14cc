#include <gtest/gtest.h>

#include "qvit/tensor.hpp"

// Unit tests run with the non-finite scan enabled.
int main(int argc, char** argv) {
  ::testing::InitGoogleTest(&argc, argv);
  qvit::set_debug_checks(true);
  return RUN_ALL_TESTS();
}
