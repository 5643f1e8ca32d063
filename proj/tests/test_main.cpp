#define DOCTEST_CONFIG_IMPLEMENT
#include <doctest.h>

#include <torch/torch.h>

int main(int argc, char** argv) {
  torch::manual_seed(20240601);
  doctest::Context ctx(argc, argv);
  return ctx.run();
}
