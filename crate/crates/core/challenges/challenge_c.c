/* Code coverage challenge: the child takes one arm of each of four
 * conditionals, selected by the parity of the corresponding input byte. */
#include "forkaware_rt.h"

int main(void) {
    unsigned char data[4] = {0, 0, 0, 0};
    size_t got = 0;
    ssize_t n;
    pid_t pid;

    fa_init();
    while (got < sizeof data && (n = read(0, data + got, sizeof data - got)) > 0)
        got += (size_t)n;

    fa_probe(FA_ROOT_ENTRY);
    pid = fork();
    if (pid == 0) { /* child process */
        if (data[0] % 2) { fa_probe(FA_ARM(0, 1)); } else { fa_probe(FA_ARM(0, 0)); }
        if (data[1] % 2) { fa_probe(FA_ARM(1, 1)); } else { fa_probe(FA_ARM(1, 0)); }
        if (data[2] % 2) { fa_probe(FA_ARM(2, 1)); } else { fa_probe(FA_ARM(2, 0)); }
        if (data[3] % 2) { fa_probe(FA_ARM(3, 1)); } else { fa_probe(FA_ARM(3, 0)); }
    } else { /* parent process */
        fa_probe(FA_PARENT_BRANCH);
        wait(NULL);
    }
    return 0;
}
